//! Latent transformer over fused real/imaginary token streams.
//!
//! The snapped latents of both streams are summed and layer-normalized,
//! projected to the embedding width, offset by learned positional
//! embeddings and passed through pre-norm bidirectional transformer blocks.
//! Two linear heads produce per-position logits over the codebook, one for
//! each stream.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{acquire, make_center_mask, sampling_budget, zero_fill, ComplexImage, NoiseSpec, SamplingMask};
use crate::nn;
use crate::params::{Adam, AdamConfig, Grads, ParamId, ParamStore};
use crate::tape::{AttentionIds, Context, FeedForwardIds, Op, Tape, ValueId, LAYER_NORM_EPS};
use crate::tokenizer::{lookup, Channel, ChannelStats, Codebook, LatentGrid, TokenIndices, Tokenizer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            embed_dim: 64,
            ffn_dim: 128,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::InvalidConfig("ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Token geometry the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Number of latent positions L.
    pub seq_len: usize,
    /// Latent dimension D.
    pub latent_dim: usize,
    /// Codebook size K.
    pub vocab: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Re,
    Im,
}

/// Per-position categorical distribution over codebook entries for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub stream: Stream,
    pub grid_h: usize,
    pub grid_w: usize,
    logits: Array2<f64>,
    probs: Array2<f64>,
}

impl TokenDistribution {
    pub fn from_logits(stream: Stream, grid_h: usize, grid_w: usize, logits: Array2<f64>) -> Result<Self> {
        if logits.nrows() != grid_h * grid_w {
            return Err(Error::Geometry(format!(
                "{} rows do not fill a {grid_h}x{grid_w} grid",
                logits.nrows()
            )));
        }
        let probs = nn::softmax_rows(&logits);
        Ok(Self {
            stream,
            grid_h,
            grid_w,
            logits,
            probs,
        })
    }

    /// Builds a distribution from explicit probabilities. Zero entries are
    /// kept as exact zeros (logit −∞).
    pub fn from_probs(stream: Stream, grid_h: usize, grid_w: usize, probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() != grid_h * grid_w {
            return Err(Error::Geometry("probability rows do not fill the grid".into()));
        }
        for row in probs.outer_iter() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput("rows must be probability vectors".into()));
            }
        }
        let logits = probs.mapv(f64::ln);
        Ok(Self {
            stream,
            grid_h,
            grid_w,
            logits,
            probs,
        })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn vocab(&self) -> usize {
        self.probs.ncols()
    }

    /// Argmax per position, lowest index on ties.
    pub fn argmax(&self) -> TokenIndices {
        TokenIndices(
            self.probs
                .outer_iter()
                .map(|row| {
                    let mut best = 0;
                    for (k, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect(),
        )
    }

    /// Shannon entropy (nats) per position, with `0·log 0 = 0`.
    pub fn entropies(&self) -> Vec<f64> {
        self.probs
            .outer_iter()
            .map(|row| {
                -row.iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>()
            })
            .map(|h| h.max(0.0))
            .collect()
    }
}

/// Most probable codebook vector at every position.
pub fn predicted_tokens(dist: &TokenDistribution, cb: &Codebook) -> Result<LatentGrid> {
    if dist.vocab() != cb.k() {
        return Err(Error::Dimension(format!(
            "distribution over {} entries but codebook has {}",
            dist.vocab(),
            cb.k()
        )));
    }
    LatentGrid::new(dist.grid_h, dist.grid_w, lookup(&dist.argmax().0, cb))
}

/// Mean over positions of `−log p(target)`, evaluated with log-sum-exp on the logits.
pub fn cross_entropy(dist: &TokenDistribution, targets: &TokenIndices) -> Result<f64> {
    if targets.len() != dist.len() {
        return Err(Error::Dimension(format!(
            "{} targets for {} positions",
            targets.len(),
            dist.len()
        )));
    }
    if let Some(&t) = targets.0.iter().find(|&&t| t >= dist.vocab()) {
        return Err(Error::InvalidInput(format!("target {t} out of range for K = {}", dist.vocab())));
    }
    Ok(nn::cross_entropy_from_logits(&dist.logits, &targets.0))
}

/// Decodes both streams, undoes the per-channel normalization and combines
/// them as `re + i·im`.
pub fn reconstruct(
    tokenizer: &Tokenizer,
    q_re: &LatentGrid,
    q_im: &LatentGrid,
    stats: [ChannelStats; 2],
) -> Result<ComplexImage> {
    let re = stats[0].denormalize(&tokenizer.decode(q_re)?);
    let im = stats[1].denormalize(&tokenizer.decode(q_im)?);
    ComplexImage::from_parts(re.height, re.width, &re.data, &im.data)
}

#[derive(Clone, Debug)]
struct ModelIds {
    fuse_g: ParamId,
    fuse_b: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    pos: ParamId,
    blocks: Vec<(AttentionIds, FeedForwardIds)>,
    final_g: ParamId,
    final_b: ParamId,
    head_re_w: ParamId,
    head_re_b: ParamId,
    head_im_w: ParamId,
    head_im_b: ParamId,
}

impl ModelIds {
    fn resolve(params: &ParamStore, cfg: &TransformerConfig) -> Result<Self> {
        let id = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("block{l}.{s}");
            blocks.push((
                AttentionIds {
                    ln_g: id(&n("ln1.g"))?,
                    ln_b: id(&n("ln1.b"))?,
                    wq: id(&n("attn.wq"))?,
                    bq: id(&n("attn.bq"))?,
                    wk: id(&n("attn.wk"))?,
                    bk: id(&n("attn.bk"))?,
                    wv: id(&n("attn.wv"))?,
                    bv: id(&n("attn.bv"))?,
                    wo: id(&n("attn.wo"))?,
                    bo: id(&n("attn.bo"))?,
                    heads: cfg.heads,
                },
                FeedForwardIds {
                    ln_g: id(&n("ln2.g"))?,
                    ln_b: id(&n("ln2.b"))?,
                    w1: id(&n("ffn.w1"))?,
                    b1: id(&n("ffn.b1"))?,
                    w2: id(&n("ffn.w2"))?,
                    b2: id(&n("ffn.b2"))?,
                },
            ));
        }
        Ok(Self {
            fuse_g: id("fuse.g")?,
            fuse_b: id("fuse.b")?,
            in_w: id("in_proj.w")?,
            in_b: id("in_proj.b")?,
            pos: id("pos_emb")?,
            blocks,
            final_g: id("final_ln.g")?,
            final_b: id("final_ln.b")?,
            head_re_w: id("head_re.w")?,
            head_re_b: id("head_re.b")?,
            head_im_w: id("head_im.w")?,
            head_im_b: id("head_im.b")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LatentModel {
    cfg: TransformerConfig,
    shape: ModelShape,
    params: ParamStore,
    ids: ModelIds,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

impl LatentModel {
    pub fn init(cfg: TransformerConfig, shape: ModelShape, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if shape.seq_len == 0 || shape.latent_dim == 0 || shape.vocab == 0 {
            return Err(Error::InvalidConfig("model shape entries must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, f, k, l) = (shape.latent_dim, cfg.embed_dim, cfg.ffn_dim, shape.vocab, shape.seq_len);
        let mut p = ParamStore::new();
        p.add("fuse.g", Array2::ones((1, d)));
        p.add("fuse.b", Array2::zeros((1, d)));
        p.add("in_proj.w", xavier(d, e, &mut rng));
        p.add("in_proj.b", Array2::zeros((1, e)));
        p.add("pos_emb", Array2::from_shape_fn((l, e), |_| rng.random_range(-0.1..0.1)));
        for b in 0..cfg.layers {
            let n = |s: &str| format!("block{b}.{s}");
            p.add(n("ln1.g"), Array2::ones((1, e)));
            p.add(n("ln1.b"), Array2::zeros((1, e)));
            for w in ["wq", "wk", "wv", "wo"] {
                p.add(n(&format!("attn.{w}")), xavier(e, e, &mut rng));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                p.add(n(&format!("attn.{bias}")), Array2::zeros((1, e)));
            }
            p.add(n("ln2.g"), Array2::ones((1, e)));
            p.add(n("ln2.b"), Array2::zeros((1, e)));
            p.add(n("ffn.w1"), xavier(e, f, &mut rng));
            p.add(n("ffn.b1"), Array2::zeros((1, f)));
            p.add(n("ffn.w2"), xavier(f, e, &mut rng));
            p.add(n("ffn.b2"), Array2::zeros((1, e)));
        }
        p.add("final_ln.g", Array2::ones((1, e)));
        p.add("final_ln.b", Array2::zeros((1, e)));
        p.add("head_re.w", xavier(e, k, &mut rng) * 0.1);
        p.add("head_re.b", Array2::zeros((1, k)));
        p.add("head_im.w", xavier(e, k, &mut rng) * 0.1);
        p.add("head_im.b", Array2::zeros((1, k)));
        Self::from_params(cfg, shape, p)
    }

    pub fn from_params(cfg: TransformerConfig, shape: ModelShape, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ids = ModelIds::resolve(&params, &cfg)?;
        let expect = |id: ParamId, dim: (usize, usize)| -> Result<()> {
            if params.get(id).dim() != dim {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {dim:?}",
                    params.name(id),
                    params.get(id).dim()
                )));
            }
            Ok(())
        };
        let (d, e, k, l) = (shape.latent_dim, cfg.embed_dim, shape.vocab, shape.seq_len);
        expect(ids.in_w, (d, e))?;
        expect(ids.pos, (l, e))?;
        expect(ids.head_re_w, (e, k))?;
        expect(ids.head_im_w, (e, k))?;
        Ok(Self {
            cfg,
            shape,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes both output heads (weights and biases).
    pub fn zero_heads(&mut self) {
        for id in [self.ids.head_re_w, self.ids.head_re_b, self.ids.head_im_w, self.ids.head_im_b] {
            self.params.get_mut(id).fill(0.0);
        }
    }

    pub fn context<'a>(&'a self, tokenizer: Option<&'a Tokenizer>) -> Context<'a> {
        Context {
            params: Some(&self.params),
            tokenizer,
        }
    }

    fn check_latents(&self, q: &Array2<f64>) -> Result<()> {
        if q.dim() != (self.shape.seq_len, self.shape.latent_dim) {
            return Err(Error::Dimension(format!(
                "latents of shape {:?} do not match model shape L = {}, D = {}",
                q.dim(),
                self.shape.seq_len,
                self.shape.latent_dim
            )));
        }
        Ok(())
    }

    /// Records `LayerNorm(q_re + q_im)` on the tape.
    pub fn record_fusion(&self, tape: &mut Tape<'_>, q_re: ValueId, q_im: ValueId) -> Result<ValueId> {
        self.check_latents(tape.value(q_re))?;
        let sum = tape.apply1(Op::Add, &[q_re, q_im])?;
        tape.apply1(
            Op::LayerNorm {
                gamma: self.ids.fuse_g,
                beta: self.ids.fuse_b,
                eps: LAYER_NORM_EPS,
            },
            &[sum],
        )
    }

    /// Records the trunk and both heads, returning `(logits_re, logits_im)`.
    pub fn record_trunk(&self, tape: &mut Tape<'_>, fused: ValueId) -> Result<(ValueId, ValueId)> {
        self.check_latents(tape.value(fused))?;
        let mut x = tape.apply1(
            Op::Linear {
                w: self.ids.in_w,
                b: self.ids.in_b,
            },
            &[fused],
        )?;
        x = tape.apply1(Op::AddParam(self.ids.pos), &[x])?;
        for (attn, ffn) in &self.ids.blocks {
            x = tape.apply1(Op::AttentionBlock(attn.clone()), &[x])?;
            x = tape.apply1(Op::FeedForwardBlock(ffn.clone()), &[x])?;
        }
        x = tape.apply1(
            Op::LayerNorm {
                gamma: self.ids.final_g,
                beta: self.ids.final_b,
                eps: LAYER_NORM_EPS,
            },
            &[x],
        )?;
        let re = tape.apply1(
            Op::Linear {
                w: self.ids.head_re_w,
                b: self.ids.head_re_b,
            },
            &[x],
        )?;
        let im = tape.apply1(
            Op::Linear {
                w: self.ids.head_im_w,
                b: self.ids.head_im_b,
            },
            &[x],
        )?;
        Ok((re, im))
    }

    pub fn record(&self, tape: &mut Tape<'_>, q_re: ValueId, q_im: ValueId) -> Result<(ValueId, ValueId)> {
        let fused = self.record_fusion(tape, q_re, q_im)?;
        self.record_trunk(tape, fused)
    }

    /// `H₀ = LayerNorm(q_re + q_im)` with the model's (learned) affine.
    pub fn fuse_streams(&self, q_re: &LatentGrid, q_im: &LatentGrid) -> Result<Array2<f64>> {
        if q_re.vectors.dim() != q_im.vectors.dim() {
            return Err(Error::Dimension("stream latents differ in shape".into()));
        }
        let mut tape = Tape::new(self.context(None));
        let (a, b) = (tape.leaf(q_re.vectors.clone()), tape.leaf(q_im.vectors.clone()));
        let f = self.record_fusion(&mut tape, a, b)?;
        Ok(tape.value(f).clone())
    }

    /// Token distributions of both streams from a fused latent.
    pub fn predict_fused(
        &self,
        fused: &Array2<f64>,
        grid: (usize, usize),
    ) -> Result<(TokenDistribution, TokenDistribution)> {
        let mut tape = Tape::new(self.context(None));
        let f = tape.leaf(fused.clone());
        let (re, im) = self.record_trunk(&mut tape, f)?;
        Ok((
            TokenDistribution::from_logits(Stream::Re, grid.0, grid.1, tape.value(re).clone())?,
            TokenDistribution::from_logits(Stream::Im, grid.0, grid.1, tape.value(im).clone())?,
        ))
    }

    pub fn predict(&self, q_re: &LatentGrid, q_im: &LatentGrid) -> Result<(TokenDistribution, TokenDistribution)> {
        let fused = self.fuse_streams(q_re, q_im)?;
        self.predict_fused(&fused, (q_re.grid_h, q_re.grid_w))
    }

    /// Sum of both streams' mean token cross-entropies and its parameter gradient.
    pub fn loss_and_grads(
        &self,
        q_re: &Array2<f64>,
        q_im: &Array2<f64>,
        targets: [&TokenIndices; 2],
    ) -> Result<(f64, Grads)> {
        let mut tape = Tape::new(self.context(None));
        let (a, b) = (tape.leaf(q_re.clone()), tape.leaf(q_im.clone()));
        let (lr, li) = self.record(&mut tape, a, b)?;
        let ce_re = tape.apply1(Op::CrossEntropy(targets[0].0.clone()), &[lr])?;
        let ce_im = tape.apply1(Op::CrossEntropy(targets[1].0.clone()), &[li])?;
        let loss = tape.apply1(Op::Add, &[ce_re, ce_im])?;
        let grads = tape.backward_scalar(loss)?;
        Ok((tape.scalar(loss), grads.params.expect("model tape carries parameters")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let extra = serde_json::json!({ "config": self.cfg, "shape": self.shape });
        self.params.save_dir(dir, extra)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, extra) = ParamStore::load_dir(dir)?;
        let cfg: TransformerConfig = serde_json::from_value(extra["config"].clone())?;
        let shape: ModelShape = serde_json::from_value(extra["shape"].clone())?;
        Self::from_params(cfg, shape, params)
    }
}

/// Draws random Cartesian training masks: the center block plus the line
/// budget of an acceleration drawn uniformly from `accel_min..=accel_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSampler {
    pub rho_c: f64,
    pub accel_min: usize,
    pub accel_max: usize,
}

impl Default for MaskSampler {
    fn default() -> Self {
        Self {
            rho_c: 0.04,
            accel_min: 2,
            accel_max: 16,
        }
    }
}

impl MaskSampler {
    pub fn sample<R: Rng>(&self, num_lines: usize, rng: &mut R) -> Result<SamplingMask> {
        if self.accel_min == 0 || self.accel_min > self.accel_max {
            return Err(Error::InvalidConfig("acceleration range must satisfy 1 <= min <= max".into()));
        }
        let accel = rng.random_range(self.accel_min..=self.accel_max);
        let mut mask = make_center_mask(num_lines, self.rho_c)?;
        let mut free = mask.unsampled_lines();
        let n = sampling_budget(num_lines, accel, self.rho_c)?.min(free.len());
        free.shuffle(rng);
        mask.insert_lines(&free[..n])?;
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub masks: MaskSampler,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            masks: MaskSampler::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

/// Full optimizer state: enough to resume training bit-identically.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LatentModel,
    pub adam: Adam,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn fresh(model: LatentModel, adam: AdamConfig) -> Self {
        let adam = Adam::new(adam, model.params());
        Self {
            model,
            adam,
            epochs_done: 0,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join("model"))?;
        let names: Vec<String> = self.model.params().ids().map(|id| self.model.params().name(id).to_string()).collect();
        for (sub, g) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            let mut store = ParamStore::new();
            for (n, t) in names.iter().zip(&g.0) {
                store.add(n.clone(), t.clone());
            }
            store.save_dir(&dir.join(sub), serde_json::Value::Null)?;
        }
        let meta = serde_json::json!({
            "adam": self.adam.cfg,
            "adam_step": self.adam.step,
            "epochs_done": self.epochs_done,
        });
        crate::io::write_atomic(&dir.join("checkpoint.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("checkpoint.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(meta_path));
        }
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(&meta_path)?)?;
        let model = LatentModel::load(&dir.join("model"))?;
        let (m, _) = ParamStore::load_dir(&dir.join("adam_m"))?;
        let (v, _) = ParamStore::load_dir(&dir.join("adam_v"))?;
        let adam = Adam {
            cfg: serde_json::from_value(meta["adam"].clone())?,
            m: Grads(m.tensors().to_vec()),
            v: Grads(v.tensors().to_vec()),
            step: meta["adam_step"].as_u64().unwrap_or(0),
        };
        Ok(Self {
            model,
            adam,
            epochs_done: meta["epochs_done"].as_u64().unwrap_or(0) as usize,
        })
    }
}

/// One optimizer step of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Training example prepared once: the ground truth and its target tokens.
struct Example<'a> {
    image: &'a ComplexImage,
    targets: [TokenIndices; 2],
}

/// Target tokens: the ground truth's channels, each normalized with its own statistics.
pub fn target_tokens(tokenizer: &Tokenizer, image: &ComplexImage) -> Result<[TokenIndices; 2]> {
    let (h, w) = (image.height(), image.width());
    let re = Channel::new(h, w, image.real_part())?;
    let im = Channel::new(h, w, image.imag_part())?;
    Ok([
        tokenizer.tokens(&ChannelStats::of(&re.data).normalize(&re))?,
        tokenizer.tokens(&ChannelStats::of(&im.data).normalize(&im))?,
    ])
}

/// Snapped latents of both channels of a zero-filled image (each normalized
/// with its own statistics), plus those statistics.
pub fn tokenize_input(tokenizer: &Tokenizer, zf: &ComplexImage) -> Result<([LatentGrid; 2], [ChannelStats; 2])> {
    let (h, w) = (zf.height(), zf.width());
    let re = Channel::new(h, w, zf.real_part())?;
    let im = Channel::new(h, w, zf.imag_part())?;
    let s_re = ChannelStats::of(&re.data);
    let s_im = ChannelStats::of(&im.data);
    let (_, q_re) = tokenizer.quantize(&tokenizer.encode(&s_re.normalize(&re))?)?;
    let (_, q_im) = tokenizer.quantize(&tokenizer.encode(&s_im.normalize(&im))?)?;
    Ok(([q_re, q_im], [s_re, s_im]))
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Trains `ckpt` for the remaining epochs up to `cfg.epochs`.
///
/// Each example gets a fresh random mask, is acquired, zero-filled and
/// tokenized, and the model is fitted to the fully sampled image's tokens.
/// Batches are processed in parallel but reduced in a fixed order, so the
/// result does not depend on thread scheduling.
pub fn train_model(
    dataset: &[ComplexImage],
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    mut ckpt: Checkpoint,
    mut on_epoch: impl FnMut(&Checkpoint, &[LossRecord]),
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let examples = dataset
        .iter()
        .map(|image| {
            Ok(Example {
                image,
                targets: target_tokens(tokenizer, image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trace = Vec::new();
    while ckpt.epochs_done < cfg.epochs {
        let epoch = ckpt.epochs_done;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut example_rng(cfg.seed, epoch, usize::MAX >> 32));
        let mut epoch_trace = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let model = &ckpt.model;
            let results: Vec<Result<(f64, Grads)>> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let mut rng = example_rng(cfg.seed, epoch, i);
                    let mask = cfg.masks.sample(ex.image.height(), &mut rng)?;
                    let noise = NoiseSpec {
                        sigma: cfg.noise.sigma,
                        seed: rng.random(),
                    };
                    let zf = zero_fill(&acquire(ex.image, &mask, &noise)?)?;
                    let ([q_re, q_im], _) = tokenize_input(tokenizer, &zf)?;
                    model.loss_and_grads(&q_re.vectors, &q_im.vectors, [&ex.targets[0], &ex.targets[1]])
                })
                .collect();
            let mut total = model.params().zeros_like();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                total.add_assign(&g);
            }
            let n = batch.len() as f64;
            loss /= n;
            total.scale(1.0 / n);
            if !loss.is_finite() || !total.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: trace.len() + epoch_trace.len(),
                    loss,
                    last_finite: Box::new(ckpt),
                });
            }
            let Checkpoint { model, adam, .. } = &mut ckpt;
            adam.update(model.params_mut(), &total);
            epoch_trace.push(LossRecord { epoch, step, loss });
        }
        ckpt.epochs_done += 1;
        trace.extend_from_slice(&epoch_trace);
        on_epoch(&ckpt, &trace);
    }
    Ok((ckpt, trace))
}

/// Mean token cross-entropy (summed over both streams) of `model` on a fixed
/// evaluation set of `(image, mask)` pairs.
pub fn evaluate_loss(
    model: &LatentModel,
    tokenizer: &Tokenizer,
    pairs: &[(ComplexImage, SamplingMask)],
) -> Result<f64> {
    let losses = pairs
        .par_iter()
        .map(|(img, mask)| {
            let targets = target_tokens(tokenizer, img)?;
            let zf = zero_fill(&acquire(img, mask, &NoiseSpec::noiseless())?)?;
            let ([q_re, q_im], _) = tokenize_input(tokenizer, &zf)?;
            let (d_re, d_im) = model.predict(&q_re, &q_im)?;
            Ok(cross_entropy(&d_re, &targets[0])? + cross_entropy(&d_im, &targets[1])?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean of each row; used by tests to check the layer-norm contract.
pub fn row_means(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(1)).unwrap().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_model(l: usize, d: usize, k: usize) -> LatentModel {
        let cfg = TransformerConfig {
            layers: 1,
            heads: 1,
            embed_dim: 8,
            ffn_dim: 16,
        };
        LatentModel::init(
            cfg,
            ModelShape {
                seq_len: l,
                latent_dim: d,
                vocab: k,
            },
            7,
        )
        .unwrap()
    }

    fn rand_grid(l: usize, d: usize, seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentGrid::new(1, l, Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = TransformerConfig {
            layers: 1,
            heads: 3,
            embed_dim: 8,
            ffn_dim: 4,
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        TransformerConfig::default().validate().unwrap();
    }

    #[test]
    fn fusion_is_layer_norm_of_sum() {
        let m = toy_model(4, 4, 8);
        let a = LatentGrid::new(1, 1, array![[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let z = LatentGrid::new(1, 1, Array2::zeros((1, 4))).unwrap();
        let m1 = LatentModel {
            shape: ModelShape {
                seq_len: 1,
                ..m.shape
            },
            ..m.clone()
        };
        let f = m1.fuse_streams(&a, &z).unwrap();
        let mean = f.sum() / 4.0;
        let var = f.mapv(|v| (v - mean) * (v - mean)).sum() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
        assert_eq!(f, m1.fuse_streams(&z, &a).unwrap());

        let (p, q) = (rand_grid(4, 4, 1), rand_grid(4, 4, 2));
        assert_eq!(m.fuse_streams(&p, &q).unwrap(), m.fuse_streams(&q, &p).unwrap());
        for mu in row_means(&m.fuse_streams(&p, &q).unwrap()) {
            assert!(mu.abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_are_distributions() {
        let m = toy_model(4, 4, 8);
        let (d_re, d_im) = m.predict(&rand_grid(4, 4, 3), &rand_grid(4, 4, 4)).unwrap();
        for d in [&d_re, &d_im] {
            for row in d.probs().outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
        assert_eq!(d_re.stream, Stream::Re);
        assert_eq!(d_im.stream, Stream::Im);
    }

    #[test]
    fn zero_heads_give_uniform() {
        let mut m = toy_model(4, 4, 8);
        m.zero_heads();
        let (d, _) = m.predict(&rand_grid(4, 4, 3), &rand_grid(4, 4, 4)).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.125).abs() < 1e-15));
        assert_eq!(d.argmax().0, vec![0; 4]);
    }

    #[test]
    fn inference_is_deterministic() {
        let m = toy_model(4, 4, 8);
        let (a, b) = (rand_grid(4, 4, 5), rand_grid(4, 4, 6));
        assert_eq!(m.predict(&a, &b).unwrap(), m.predict(&a, &b).unwrap());
    }

    #[test]
    fn permutation_equivariance() {
        let m = toy_model(5, 4, 8);
        let (a, b) = (rand_grid(5, 4, 8), rand_grid(5, 4, 9));
        let fused = m.fuse_streams(&a, &b).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let pf = fused.select(Axis(0), &perm);
        let mut pm = m.clone();
        let pos = pm.ids.pos;
        let permuted = pm.params.get(pos).select(Axis(0), &perm);
        *pm.params.get_mut(pos) = permuted;
        let (d, _) = m.predict_fused(&fused, (1, 5)).unwrap();
        let (pd, _) = pm.predict_fused(&pf, (1, 5)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for (x, y) in pd.probs().row(i).iter().zip(d.probs().row(src).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predicted_tokens_argmax() {
        let cb = Codebook::new(Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64)).unwrap();
        let d = TokenDistribution::from_probs(Stream::Re, 1, 2, array![[0.1, 0.7, 0.2], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]])
            .unwrap();
        let g = predicted_tokens(&d, &cb).unwrap();
        assert_eq!(g.vectors, array![[2.0, 3.0], [0.0, 1.0]]);
        let mut onehot = Array2::zeros((1, 8));
        onehot[[0, 7]] = 1.0;
        let cb8 = Codebook::new(Array2::from_shape_fn((8, 1), |(i, _)| i as f64)).unwrap();
        let d = TokenDistribution::from_probs(Stream::Im, 1, 1, onehot).unwrap();
        assert_eq!(predicted_tokens(&d, &cb8).unwrap().vectors[[0, 0]], 7.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let d = TokenDistribution::from_logits(Stream::Re, 1, 2, Array2::zeros((2, 256))).unwrap();
        let ce = cross_entropy(&d, &TokenIndices(vec![3, 200])).unwrap();
        assert!((ce - 256f64.ln()).abs() < 1e-12);
        let d = TokenDistribution::from_probs(Stream::Re, 1, 2, array![[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]])
            .unwrap();
        let ce = cross_entropy(&d, &TokenIndices(vec![0, 2])).unwrap();
        assert!((ce - 1.5 * 2f64.ln()).abs() < 1e-12);
        let d = TokenDistribution::from_probs(Stream::Re, 1, 1, array![[0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy(&d, &TokenIndices(vec![1])).unwrap(), 0.0);
        assert!(matches!(cross_entropy(&d, &TokenIndices(vec![2])), Err(Error::InvalidInput(_))));
    }

    /// Every parameter gradient of the training loss against central differences.
    #[test]
    fn training_gradients_match_finite_differences() {
        let m = toy_model(4, 8, 8);
        let (a, b) = (rand_grid(4, 8, 10), rand_grid(4, 8, 11));
        let t = [TokenIndices(vec![1, 5, 0, 7]), TokenIndices(vec![2, 2, 6, 3])];
        let (_, g) = m.loss_and_grads(&a.vectors, &b.vectors, [&t[0], &t[1]]).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in m.params.ids() {
            for idx in 0..m.params.get(id).len() {
                let mut mp = m.clone();
                let mut mm = m.clone();
                mp.params.get_mut(id).as_slice_mut().unwrap()[idx] += h;
                mm.params.get_mut(id).as_slice_mut().unwrap()[idx] -= h;
                let lp = mp.loss_and_grads(&a.vectors, &b.vectors, [&t[0], &t[1]]).unwrap().0;
                let lm = mm.loss_and_grads(&a.vectors, &b.vectors, [&t[0], &t[1]]).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.get(id).as_slice().unwrap()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let m = toy_model(2, 4, 4);
        let (a, b) = (rand_grid(2, 4, 12), rand_grid(2, 4, 13));
        let t = [TokenIndices(vec![3, 0]), TokenIndices(vec![1, 1])];
        let (_, g) = m.loss_and_grads(&a.vectors, &b.vectors, [&t[0], &t[1]]).unwrap();
        let h = 1e-6;
        for id in [m.ids.head_re_w, m.ids.head_re_b, m.ids.head_im_w, m.ids.head_im_b] {
            for idx in 0..m.params.get(id).len() {
                let mut mp = m.clone();
                let mut mm = m.clone();
                mp.params.get_mut(id).as_slice_mut().unwrap()[idx] += h;
                mm.params.get_mut(id).as_slice_mut().unwrap()[idx] -= h;
                let lp = mp.loss_and_grads(&a.vectors, &b.vectors, [&t[0], &t[1]]).unwrap().0;
                let lm = mm.loss_and_grads(&a.vectors, &b.vectors, [&t[0], &t[1]]).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.get(id).as_slice().unwrap()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-5, "{} [{idx}]: fd {fd} vs {an}", m.params.name(id));
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_model(4, 4, 8);
        m.save(dir.path()).unwrap();
        let back = LatentModel::load(dir.path()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.shape(), m.shape());
    }

    #[test]
    fn mask_sampler_respects_center_and_budget() {
        let s = MaskSampler {
            rho_c: 0.1,
            accel_min: 4,
            accel_max: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = s.sample(40, &mut rng).unwrap();
            assert!(m.contains(&make_center_mask(40, 0.1).unwrap()));
            assert_eq!(m.count(), 4 + 9);
        }
    }
}
