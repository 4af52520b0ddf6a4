//! Reverse-mode tape over composite nodes.
//!
//! Values are dense `f64` matrices. Each recorded node keeps its inputs,
//! outputs and whatever forward intermediates its adjoint needs. Complex
//! k-space enters the tape as separate real and imaginary planes, and a
//! gradient with respect to a complex entry is reported as `∂/∂re + i·∂/∂im`.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kspace::centered_fft2;
use crate::nn::{self, AttentionCache, AttentionWeights, FeedForwardCache, LayerNormCache};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tokenizer::{lookup, patchify, unpatchify, Channel, ChannelStats, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Parameters of one pre-norm self-attention block `x + MHA(LN(x))`.
#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

/// Parameters of one pre-norm feed-forward block `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForwardIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub enum Op {
    /// `(re, im)` of centered k-space → `(re, im)` of the image.
    InverseFft,
    /// Whole-channel standardization to zero mean, unit std.
    ChannelNorm,
    /// Patchify and apply the tokenizer's affine encoder.
    PatchEncode,
    /// Nearest-codebook snap; its adjoint is the straight-through identity.
    Quantize,
    /// Adds a fixed matrix. Used to emulate a quantizer with frozen assignments.
    Offset(Array2<f64>),
    Add,
    Scale(f64),
    LayerNorm { gamma: ParamId, beta: ParamId, eps: f64 },
    Linear { w: ParamId, b: ParamId },
    AddParam(ParamId),
    AttentionBlock(AttentionIds),
    FeedForwardBlock(FeedForwardIds),
    /// `1×1` sum over rows of the Shannon entropy of `softmax(row)`.
    Entropy,
    /// `1×1` mean token cross-entropy against fixed targets.
    CrossEntropy(Vec<usize>),
    /// `1×1` sum of squares.
    SumSquares,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Cache {
    None,
    Norm { xhat: Array2<f64>, inv_std: f64, stats: ChannelStats },
    LayerNorm(LayerNormCache),
    Attention(LayerNormCache, AttentionCache),
    FeedForward(LayerNormCache, FeedForwardCache),
    Quantize(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    outputs: Vec<ValueId>,
    cache: Cache,
}

/// Read-only state a tape may consult: trainable parameters and the frozen tokenizer.
#[derive(Clone, Copy, Default)]
pub struct Context<'a> {
    pub params: Option<&'a ParamStore>,
    pub tokenizer: Option<&'a Tokenizer>,
}

pub struct Tape<'a> {
    ctx: Context<'a>,
    values: Vec<Array2<f64>>,
    nodes: Vec<Node>,
}

/// Result of a reverse sweep.
pub struct Gradients {
    values: Vec<Option<Array2<f64>>>,
    pub params: Option<Grads>,
}

impl Gradients {
    /// Gradient of a value, or `None` when no seeded output depends on it.
    pub fn get(&self, id: ValueId) -> Option<&Array2<f64>> {
        self.values[id.0].as_ref()
    }

    pub fn get_or_zeros(&self, id: ValueId, shape: (usize, usize)) -> Array2<f64> {
        self.values[id.0].clone().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl<'a> Tape<'a> {
    pub fn new(ctx: Context<'a>) -> Self {
        Self {
            ctx,
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> ValueId {
        self.values.push(value);
        ValueId(self.values.len() - 1)
    }

    pub fn value(&self, id: ValueId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: ValueId) -> f64 {
        self.values[id.0][[0, 0]]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// True when the tape contains a straight-through quantization node.
    pub fn has_ste_marker(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.op, Op::Quantize))
    }

    pub fn apply(&mut self, op: Op, inputs: &[ValueId]) -> Result<Vec<ValueId>> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.values.len()) {
            return Err(Error::Internal(format!("tape input {bad:?} does not exist")));
        }
        let args: Vec<&Array2<f64>> = inputs.iter().map(|v| &self.values[v.0]).collect();
        let (outs, cache) = eval(&op, &args, self.ctx)?;
        let outputs: Vec<ValueId> = outs.into_iter().map(|v| self.leaf(v)).collect();
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            outputs: outputs.clone(),
            cache,
        });
        Ok(outputs)
    }

    pub fn apply1(&mut self, op: Op, inputs: &[ValueId]) -> Result<ValueId> {
        Ok(self.apply(op, inputs)?[0])
    }

    pub fn inverse_fft(&mut self, re: ValueId, im: ValueId) -> Result<(ValueId, ValueId)> {
        let out = self.apply(Op::InverseFft, &[re, im])?;
        Ok((out[0], out[1]))
    }

    /// Standardizes a channel and returns the statistics used.
    pub fn channel_norm(&mut self, x: ValueId) -> Result<(ValueId, ChannelStats)> {
        let z = self.apply1(Op::ChannelNorm, &[x])?;
        match &self.nodes.last().unwrap().cache {
            Cache::Norm { stats, .. } => Ok((z, *stats)),
            _ => unreachable!(),
        }
    }

    /// Straight-through quantization; returns the snapped values and their codebook indices.
    pub fn quantize(&mut self, lat: ValueId) -> Result<(ValueId, Vec<usize>)> {
        let q = self.apply1(Op::Quantize, &[lat])?;
        match &self.nodes.last().unwrap().cache {
            Cache::Quantize(idx) => Ok((q, idx.clone())),
            _ => unreachable!(),
        }
    }

    /// Re-executes every node from its recorded inputs and checks that the
    /// outputs are reproduced bit for bit.
    pub fn replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let args: Vec<&Array2<f64>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let (outs, _) = eval(&node.op, &args, self.ctx)?;
            for (o, id) in outs.iter().zip(&node.outputs) {
                if o != &self.values[id.0] {
                    return Err(Error::Internal(format!(
                        "replay of node {i} ({:?}) does not reproduce its recorded output",
                        op_name(&node.op)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep from weighted seeds `(value, ∂L/∂value)`.
    pub fn backward(&self, seeds: &[(ValueId, Array2<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        for (id, g) in seeds {
            if id.0 >= self.values.len() {
                return Err(Error::Internal(format!("seed {id:?} is not on the tape")));
            }
            if g.dim() != self.values[id.0].dim() {
                return Err(Error::Internal(format!(
                    "seed gradient shape {:?} differs from value shape {:?}",
                    g.dim(),
                    self.values[id.0].dim()
                )));
            }
            accumulate(&mut grads[id.0], g.clone());
        }
        let mut pgrads = self.ctx.params.map(|p| p.zeros_like());
        for node in self.nodes.iter().rev() {
            if node.outputs.iter().all(|o| grads[o.0].is_none()) {
                continue;
            }
            let douts: Vec<Array2<f64>> = node
                .outputs
                .iter()
                .map(|o| grads[o.0].clone().unwrap_or_else(|| Array2::zeros(self.values[o.0].dim())))
                .collect();
            let args: Vec<&Array2<f64>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let dins = adjoint(node, &args, &douts, self.ctx, pgrads.as_mut())?;
            for (id, g) in node.inputs.iter().zip(dins) {
                if let Some(g) = g {
                    accumulate(&mut grads[id.0], g);
                }
            }
        }
        Ok(Gradients {
            values: grads,
            params: pgrads,
        })
    }

    /// Convenience: gradient of a scalar (`1×1`) value.
    pub fn backward_scalar(&self, loss: ValueId) -> Result<Gradients> {
        if self.values.get(loss.0).map(|v| v.dim()) != Some((1, 1)) {
            return Err(Error::Internal("loss must be a recorded 1x1 value".into()));
        }
        self.backward(&[(loss, Array2::ones((1, 1)))])
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::InverseFft => "InverseFft",
        Op::ChannelNorm => "ChannelNorm",
        Op::PatchEncode => "PatchEncode",
        Op::Quantize => "Quantize",
        Op::Offset(_) => "Offset",
        Op::Add => "Add",
        Op::Scale(_) => "Scale",
        Op::LayerNorm { .. } => "LayerNorm",
        Op::Linear { .. } => "Linear",
        Op::AddParam(_) => "AddParam",
        Op::AttentionBlock(_) => "AttentionBlock",
        Op::FeedForwardBlock(_) => "FeedForwardBlock",
        Op::Entropy => "Entropy",
        Op::CrossEntropy(_) => "CrossEntropy",
        Op::SumSquares => "SumSquares",
    }
}

fn need_params<'a>(ctx: Context<'a>) -> Result<&'a ParamStore> {
    ctx.params
        .ok_or_else(|| Error::Internal("tape node needs parameters but none were provided".into()))
}

fn need_tokenizer<'a>(ctx: Context<'a>) -> Result<&'a Tokenizer> {
    ctx.tokenizer
        .ok_or_else(|| Error::Internal("tape node needs the tokenizer but none was provided".into()))
}

fn expect_arity(op: &Op, args: &[&Array2<f64>], n: usize) -> Result<()> {
    if args.len() != n {
        return Err(Error::Internal(format!(
            "{} expects {n} inputs, got {}",
            op_name(op),
            args.len()
        )));
    }
    Ok(())
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

fn complex_transform(re: &Array2<f64>, im: &Array2<f64>, inverse: bool) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = re.dim();
    let mut buf: Vec<Complex64> = re.iter().zip(im.iter()).map(|(&a, &b)| Complex64::new(a, b)).collect();
    centered_fft2(&mut buf, h, w, inverse);
    (
        Array2::from_shape_fn((h, w), |(r, c)| buf[r * w + c].re),
        Array2::from_shape_fn((h, w), |(r, c)| buf[r * w + c].im),
    )
}

fn attention_weights<'p>(p: &'p ParamStore, ids: &AttentionIds) -> AttentionWeights<'p> {
    AttentionWeights {
        wq: p.get(ids.wq),
        bq: p.get(ids.bq),
        wk: p.get(ids.wk),
        bk: p.get(ids.bk),
        wv: p.get(ids.wv),
        bv: p.get(ids.bv),
        wo: p.get(ids.wo),
        bo: p.get(ids.bo),
        heads: ids.heads,
    }
}

fn eval(op: &Op, args: &[&Array2<f64>], ctx: Context<'_>) -> Result<(Vec<Array2<f64>>, Cache)> {
    match op {
        Op::InverseFft => {
            expect_arity(op, args, 2)?;
            same_shape(args[0], args[1])?;
            let (re, im) = complex_transform(args[0], args[1], true);
            Ok((vec![re, im], Cache::None))
        }
        Op::ChannelNorm => {
            expect_arity(op, args, 1)?;
            let x = args[0];
            let stats = ChannelStats::of(x.as_standard_layout().as_slice().unwrap());
            let inv_std = 1.0 / stats.std;
            let xhat = x.mapv(|v| (v - stats.mean) * inv_std);
            Ok((vec![xhat.clone()], Cache::Norm { xhat, inv_std, stats }))
        }
        Op::PatchEncode => {
            expect_arity(op, args, 1)?;
            let tok = need_tokenizer(ctx)?;
            let maps = tok.maps()?;
            let (h, w) = args[0].dim();
            let ch = Channel::new(h, w, args[0].iter().copied().collect())?;
            let patches = patchify(&ch, tok.patch_size())?;
            Ok((vec![patches.dot(&maps.enc_w) + &maps.enc_b], Cache::None))
        }
        Op::Quantize => {
            expect_arity(op, args, 1)?;
            let cb = need_tokenizer(ctx)?.codebook()?;
            if args[0].ncols() != cb.d() {
                return Err(Error::Dimension("latent and codebook dimensions differ".into()));
            }
            let idx: Vec<usize> = args[0].outer_iter().map(|v| cb.nearest(v)).collect();
            Ok((vec![lookup(&idx, cb)], Cache::Quantize(idx)))
        }
        Op::Offset(c) => {
            expect_arity(op, args, 1)?;
            same_shape(args[0], c)?;
            Ok((vec![args[0] + c], Cache::None))
        }
        Op::Add => {
            expect_arity(op, args, 2)?;
            same_shape(args[0], args[1])?;
            Ok((vec![args[0] + args[1]], Cache::None))
        }
        Op::Scale(s) => {
            expect_arity(op, args, 1)?;
            Ok((vec![args[0] * *s], Cache::None))
        }
        Op::LayerNorm { gamma, beta, eps } => {
            expect_arity(op, args, 1)?;
            let p = need_params(ctx)?;
            let (y, cache) = nn::layer_norm(args[0], p.get(*gamma), p.get(*beta), *eps);
            Ok((vec![y], Cache::LayerNorm(cache)))
        }
        Op::Linear { w, b } => {
            expect_arity(op, args, 1)?;
            let p = need_params(ctx)?;
            if args[0].ncols() != p.get(*w).nrows() {
                return Err(Error::Dimension(format!(
                    "linear input width {} does not match weight rows {}",
                    args[0].ncols(),
                    p.get(*w).nrows()
                )));
            }
            Ok((vec![nn::linear(args[0], p.get(*w), p.get(*b))], Cache::None))
        }
        Op::AddParam(id) => {
            expect_arity(op, args, 1)?;
            let p = need_params(ctx)?;
            same_shape(args[0], p.get(*id))?;
            Ok((vec![args[0] + p.get(*id)], Cache::None))
        }
        Op::AttentionBlock(ids) => {
            expect_arity(op, args, 1)?;
            let p = need_params(ctx)?;
            let (a, ln) = nn::layer_norm(args[0], p.get(ids.ln_g), p.get(ids.ln_b), LAYER_NORM_EPS);
            let (out, attn) = nn::attention(&a, &attention_weights(p, ids));
            Ok((vec![args[0] + &out], Cache::Attention(ln, attn)))
        }
        Op::FeedForwardBlock(ids) => {
            expect_arity(op, args, 1)?;
            let p = need_params(ctx)?;
            let (a, ln) = nn::layer_norm(args[0], p.get(ids.ln_g), p.get(ids.ln_b), LAYER_NORM_EPS);
            let (out, ff) = nn::feed_forward(&a, p.get(ids.w1), p.get(ids.b1), p.get(ids.w2), p.get(ids.b2));
            Ok((vec![args[0] + &out], Cache::FeedForward(ln, ff)))
        }
        Op::Entropy => {
            expect_arity(op, args, 1)?;
            let total: f64 = nn::entropy_from_logits(args[0]).iter().sum();
            Ok((vec![Array2::from_elem((1, 1), total)], Cache::None))
        }
        Op::CrossEntropy(targets) => {
            expect_arity(op, args, 1)?;
            let (l, k) = args[0].dim();
            if targets.len() != l {
                return Err(Error::Dimension(format!("{} targets for {l} positions", targets.len())));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= k) {
                return Err(Error::InvalidInput(format!("target index {t} out of range for K = {k}")));
            }
            let ce = nn::cross_entropy_from_logits(args[0], targets);
            Ok((vec![Array2::from_elem((1, 1), ce)], Cache::None))
        }
        Op::SumSquares => {
            expect_arity(op, args, 1)?;
            let s = args[0].iter().map(|v| v * v).sum();
            Ok((vec![Array2::from_elem((1, 1), s)], Cache::None))
        }
    }
}

fn adjoint(
    node: &Node,
    args: &[&Array2<f64>],
    douts: &[Array2<f64>],
    ctx: Context<'_>,
    mut pgrads: Option<&mut Grads>,
) -> Result<Vec<Option<Array2<f64>>>> {
    let dy = &douts[0];
    let mut pg = |id: ParamId, g: &Array2<f64>| {
        if let Some(acc) = pgrads.as_deref_mut() {
            acc.accumulate(id, g);
        }
    };
    let out = match (&node.op, &node.cache) {
        (Op::InverseFft, _) => {
            // adjoint of the unitary inverse transform is the forward transform
            let (re, im) = complex_transform(&douts[0], &douts[1], false);
            vec![Some(re), Some(im)]
        }
        (Op::ChannelNorm, Cache::Norm { xhat, inv_std, .. }) => {
            let n = xhat.len();
            let flat_x = xhat.to_shape((1, n)).unwrap().to_owned();
            let flat_g = dy.to_shape((1, n)).unwrap().to_owned();
            let dx = nn::normalize_backward(&flat_x, &[*inv_std], &flat_g);
            vec![Some(dx.into_shape_with_order(xhat.dim()).unwrap())]
        }
        (Op::PatchEncode, _) => {
            let tok = need_tokenizer(ctx)?;
            let (h, w) = args[0].dim();
            let dpatches = dy.dot(&tok.maps()?.enc_w.t());
            let ch = unpatchify(&dpatches, h, w, tok.patch_size())?;
            vec![Some(Array2::from_shape_vec((h, w), ch.data).unwrap())]
        }
        (Op::Quantize, _) => vec![Some(crate::tokenizer::ste_quantize_grad(dy))],
        (Op::Offset(_), _) => vec![Some(dy.clone())],
        (Op::Add, _) => vec![Some(dy.clone()), Some(dy.clone())],
        (Op::Scale(s), _) => vec![Some(dy * *s)],
        (Op::LayerNorm { gamma, beta, .. }, Cache::LayerNorm(c)) => {
            let p = need_params(ctx)?;
            let (dx, dg, db) = nn::layer_norm_backward(c, p.get(*gamma), dy);
            pg(*gamma, &dg);
            pg(*beta, &db);
            vec![Some(dx)]
        }
        (Op::Linear { w, b }, _) => {
            let p = need_params(ctx)?;
            let (dx, dw, db) = nn::linear_backward(args[0], p.get(*w), dy);
            pg(*w, &dw);
            pg(*b, &db);
            vec![Some(dx)]
        }
        (Op::AddParam(id), _) => {
            pg(*id, dy);
            vec![Some(dy.clone())]
        }
        (Op::AttentionBlock(ids), Cache::Attention(ln, attn)) => {
            let p = need_params(ctx)?;
            let (da, g) = nn::attention_backward(&attention_weights(p, ids), attn, dy);
            let (dx_ln, dg, db) = nn::layer_norm_backward(ln, p.get(ids.ln_g), &da);
            for (id, grad) in [
                (ids.wq, &g.wq),
                (ids.bq, &g.bq),
                (ids.wk, &g.wk),
                (ids.bk, &g.bk),
                (ids.wv, &g.wv),
                (ids.bv, &g.bv),
                (ids.wo, &g.wo),
                (ids.bo, &g.bo),
                (ids.ln_g, &dg),
                (ids.ln_b, &db),
            ] {
                pg(id, grad);
            }
            vec![Some(dy + &dx_ln)]
        }
        (Op::FeedForwardBlock(ids), Cache::FeedForward(ln, ff)) => {
            let p = need_params(ctx)?;
            let (da, [dw1, db1, dw2, db2]) = nn::feed_forward_backward(ff, p.get(ids.w1), p.get(ids.w2), dy);
            let (dx_ln, dg, db) = nn::layer_norm_backward(ln, p.get(ids.ln_g), &da);
            for (id, grad) in [
                (ids.w1, &dw1),
                (ids.b1, &db1),
                (ids.w2, &dw2),
                (ids.b2, &db2),
                (ids.ln_g, &dg),
                (ids.ln_b, &db),
            ] {
                pg(id, grad);
            }
            vec![Some(dy + &dx_ln)]
        }
        (Op::Entropy, _) => vec![Some(nn::entropy_backward(args[0], dy[[0, 0]]))],
        (Op::CrossEntropy(t), _) => vec![Some(nn::cross_entropy_backward(args[0], t, dy[[0, 0]]))],
        (Op::SumSquares, _) => vec![Some(args[0] * (2.0 * dy[[0, 0]]))],
        (op, _) => {
            return Err(Error::Internal(format!(
                "node {} has no cached forward state",
                op_name(op)
            )))
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{forward_fft, ComplexImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn inverse_fft_node_matches_kspace_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (re, im) = (rand_mat(6, 4, &mut rng), rand_mat(6, 4, &mut rng));
        let mut tape = Tape::new(Context::default());
        let (a, b) = (tape.leaf(re.clone()), tape.leaf(im.clone()));
        let (xr, xi) = tape.inverse_fft(a, b).unwrap();
        let img = ComplexImage::from_parts(
            6,
            4,
            tape.value(xr).as_slice().unwrap(),
            tape.value(xi).as_slice().unwrap(),
        )
        .unwrap();
        let k = forward_fft(&img).unwrap();
        for (z, (r, i)) in k.data().iter().zip(re.iter().zip(im.iter())) {
            assert!((z.re - r).abs() < 1e-12 && (z.im - i).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (re, im) = (rand_mat(4, 4, &mut rng), rand_mat(4, 4, &mut rng));
        let (wr, wi) = (rand_mat(4, 4, &mut rng), rand_mat(4, 4, &mut rng));
        let f = |re: &Array2<f64>, im: &Array2<f64>| {
            let (xr, xi) = complex_transform(re, im, true);
            (&xr * &wr).sum() + (&xi * &wi).sum()
        };
        let mut tape = Tape::new(Context::default());
        let (a, b) = (tape.leaf(re.clone()), tape.leaf(im.clone()));
        let (xr, xi) = tape.inverse_fft(a, b).unwrap();
        let g = tape.backward(&[(xr, wr.clone()), (xi, wi.clone())]).unwrap();
        let h = 1e-6;
        for idx in 0..16 {
            let (r, c) = (idx / 4, idx % 4);
            for (which, grad) in [(0, g.get(a).unwrap()), (1, g.get(b).unwrap())] {
                let (mut p, mut m) = ((re.clone(), im.clone()), (re.clone(), im.clone()));
                if which == 0 {
                    p.0[[r, c]] += h;
                    m.0[[r, c]] -= h;
                } else {
                    p.1[[r, c]] += h;
                    m.1[[r, c]] -= h;
                }
                let fd = (f(&p.0, &p.1) - f(&m.0, &m.1)) / (2.0 * h);
                assert!((fd - grad[[r, c]]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn channel_norm_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(4, 5, &mut rng);
        let w = rand_mat(4, 5, &mut rng);
        let mut tape = Tape::new(Context::default());
        let a = tape.leaf(x.clone());
        let (z, stats) = tape.channel_norm(a).unwrap();
        assert!((stats.mean - x.mean().unwrap()).abs() < 1e-15);
        let g = tape.backward(&[(z, w.clone())]).unwrap();
        let f = |x: &Array2<f64>| {
            let s = ChannelStats::of(x.as_slice().unwrap());
            x.mapv(|v| (v - s.mean) / s.std).iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for idx in 0..20 {
            let (r, c) = (idx / 5, idx % 5);
            let (mut p, mut m) = (x.clone(), x.clone());
            p[[r, c]] += h;
            m[[r, c]] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = g.get(a).unwrap()[[r, c]];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn sum_squares_through_zero_fill_is_twice_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (re, im) = (rand_mat(8, 8, &mut rng), rand_mat(8, 8, &mut rng));
        let mut tape = Tape::new(Context::default());
        let (a, b) = (tape.leaf(re.clone()), tape.leaf(im.clone()));
        let (xr, xi) = tape.inverse_fft(a, b).unwrap();
        let sr = tape.apply1(Op::SumSquares, &[xr]).unwrap();
        let si = tape.apply1(Op::SumSquares, &[xi]).unwrap();
        let loss = tape.apply1(Op::Add, &[sr, si]).unwrap();
        let g = tape.backward_scalar(loss).unwrap();
        for (gv, yv) in g.get(a).unwrap().iter().zip(re.iter()) {
            assert!((gv - 2.0 * yv).abs() < 1e-12);
        }
        for (gv, yv) in g.get(b).unwrap().iter().zip(im.iter()) {
            assert!((gv - 2.0 * yv).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradient() {
        let mut tape = Tape::new(Context::default());
        let a = tape.leaf(Array2::ones((2, 2)));
        let b = tape.leaf(Array2::ones((2, 2)));
        let (xr, _) = tape.inverse_fft(a, b).unwrap();
        let s = tape.apply1(Op::SumSquares, &[xr]).unwrap();
        let g = tape.backward(&[(s, Array2::zeros((1, 1)))]).unwrap();
        assert!(g.get(a).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn replay_reproduces_and_detects_tampering() {
        let mut tape = Tape::new(Context::default());
        let a = tape.leaf(Array2::from_elem((2, 2), 0.5));
        let b = tape.leaf(Array2::from_elem((2, 2), -0.25));
        let (xr, xi) = tape.inverse_fft(a, b).unwrap();
        let _ = tape.apply1(Op::Add, &[xr, xi]).unwrap();
        tape.replay().unwrap();
        tape.values[xr.0][[0, 0]] += 1.0;
        assert!(matches!(tape.replay(), Err(Error::Internal(_))));
    }

    #[test]
    fn missing_context_is_an_internal_error() {
        let mut tape = Tape::new(Context::default());
        let a = tape.leaf(Array2::zeros((2, 2)));
        assert!(matches!(tape.apply(Op::Quantize, &[a]), Err(Error::Internal(_))));
        assert!(matches!(tape.apply(Op::Add, &[a, ValueId(99)]), Err(Error::Internal(_))));
    }
}
