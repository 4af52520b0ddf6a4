//! Vector-quantized patch tokenizer.
//!
//! Each real image channel is cut into non-overlapping `p×p` patches. A single
//! affine map projects every patch to a `D`-dimensional latent, the quantizer
//! snaps each latent to its nearest codebook entry, and a second affine map
//! decodes codebook vectors back to patches. The real and imaginary channels
//! of a complex image share one tokenizer.
//!
//! Training fits the encoder as the top-`D` principal subspace of the training
//! patches, the codebook with Lloyd's k-means (k-means++ seeding), and the
//! decoder by least squares from snapped latents back to pixels.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{f64s_from_base64, f64s_to_base64, write_atomic};

/// One real-valued image plane (the real or imaginary part of a complex image).
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Channel {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "channel of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }
}

/// Per-image channel statistics used to normalize before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Variance floor of the channel normalization.
pub const NORM_EPS: f64 = 1e-8;

impl ChannelStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: (var + NORM_EPS).sqrt(),
        }
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn normalize(&self, ch: &Channel) -> Channel {
        Channel {
            height: ch.height,
            width: ch.width,
            data: ch.data.iter().map(|v| (v - self.mean) / self.std).collect(),
        }
    }

    pub fn denormalize(&self, ch: &Channel) -> Channel {
        Channel {
            height: ch.height,
            width: ch.width,
            data: ch.data.iter().map(|v| v * self.std + self.mean).collect(),
        }
    }
}

/// Discrete latent dictionary, `K × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidConfig("codebook must be non-empty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("codebook entries must be finite".into()));
        }
        for i in 0..entries.nrows() {
            for j in i + 1..entries.nrows() {
                if entries.row(i) == entries.row(j) {
                    return Err(Error::DegenerateData(format!(
                        "codebook entries {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> ArrayView1<'_, f64> {
        self.entries.row(k)
    }

    /// Index of the L2-nearest entry; ties go to the lowest index.
    pub fn nearest(&self, v: ArrayView1<'_, f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.outer_iter().enumerate() {
            let d: f64 = e.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// `L × D` latent vectors laid out on a `grid_h × grid_w` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub vectors: Array2<f64>,
}

impl LatentGrid {
    pub fn new(grid_h: usize, grid_w: usize, vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() != grid_h * grid_w {
            return Err(Error::Geometry(format!(
                "{} latent rows do not fill a {grid_h}x{grid_w} grid",
                vectors.nrows()
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// One codebook index per latent position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIndices(pub Vec<usize>);

impl TokenIndices {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn check_geometry(height: usize, width: usize, p: usize) -> Result<()> {
    if p == 0 || height % p != 0 || width % p != 0 || height == 0 || width == 0 {
        return Err(Error::Geometry(format!(
            "patch size {p} does not tile a {height}x{width} image"
        )));
    }
    Ok(())
}

/// Row-major non-overlapping `p×p` patches, each flattened row-major into a row
/// of the returned `L × p²` matrix.
pub fn patchify(ch: &Channel, p: usize) -> Result<Array2<f64>> {
    check_geometry(ch.height, ch.width, p)?;
    let (gh, gw) = (ch.height / p, ch.width / p);
    let mut out = Array2::zeros((gh * gw, p * p));
    for gr in 0..gh {
        for gc in 0..gw {
            let mut row = out.row_mut(gr * gw + gc);
            for dr in 0..p {
                let src = (gr * p + dr) * ch.width + gc * p;
                for dc in 0..p {
                    row[dr * p + dc] = ch.data[src + dc];
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: &Array2<f64>, height: usize, width: usize, p: usize) -> Result<Channel> {
    check_geometry(height, width, p)?;
    let (gh, gw) = (height / p, width / p);
    if patches.nrows() != gh * gw || patches.ncols() != p * p {
        return Err(Error::Geometry(format!(
            "{}x{} patch matrix does not match a {height}x{width} image with p = {p}",
            patches.nrows(),
            patches.ncols()
        )));
    }
    let mut data = vec![0.0; height * width];
    for gr in 0..gh {
        for gc in 0..gw {
            let row = patches.row(gr * gw + gc);
            for dr in 0..p {
                let dst = (gr * p + dr) * width + gc * p;
                for dc in 0..p {
                    data[dst + dc] = row[dr * p + dc];
                }
            }
        }
    }
    Ok(Channel { height, width, data })
}

/// Snaps every latent to its nearest codebook entry.
pub fn quantize(lat: &LatentGrid, cb: &Codebook) -> Result<(TokenIndices, LatentGrid)> {
    if lat.dim() != cb.d() {
        return Err(Error::Dimension(format!(
            "latent dimension {} does not match codebook dimension {}",
            lat.dim(),
            cb.d()
        )));
    }
    let idx: Vec<usize> = lat.vectors.outer_iter().map(|v| cb.nearest(v)).collect();
    let snapped = lookup(&idx, cb);
    Ok((
        TokenIndices(idx),
        LatentGrid {
            grid_h: lat.grid_h,
            grid_w: lat.grid_w,
            vectors: snapped,
        },
    ))
}

/// Codebook rows addressed by `idx`.
pub fn lookup(idx: &[usize], cb: &Codebook) -> Array2<f64> {
    cb.entries.select(Axis(0), idx)
}

/// Straight-through rule: the quantizer's Jacobian is taken to be the identity.
pub fn ste_quantize_grad(upstream: &Array2<f64>) -> Array2<f64> {
    upstream.clone()
}

/// Encoder `z = x W_enc + b_enc` and decoder `x = z W_dec + b_dec` on flattened patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMaps {
    /// `p² × D`
    pub enc_w: Array2<f64>,
    /// length `D`
    pub enc_b: Array1<f64>,
    /// `D × p²`
    pub dec_w: Array2<f64>,
    /// length `p²`
    pub dec_b: Array1<f64>,
}

impl PatchMaps {
    /// Decoder set to the Moore–Penrose pseudo-inverse of the encoder, so that
    /// `decode(encode(x)) = x` for every `x` in the encoder's row space (shifted by the bias).
    pub fn with_pseudo_inverse_decoder(enc_w: Array2<f64>, enc_b: Array1<f64>) -> Self {
        let (n, d) = enc_w.dim();
        let m = DMatrix::from_fn(n, d, |i, j| enc_w[[i, j]]);
        let pinv = m.pseudo_inverse(1e-12).expect("pseudo-inverse with positive eps");
        let dec_w = Array2::from_shape_fn((d, n), |(i, j)| pinv[(i, j)]);
        let dec_b = -enc_b.dot(&dec_w);
        Self {
            enc_w,
            enc_b,
            dec_w,
            dec_b,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub k: usize,
    pub d: usize,
    pub p: usize,
    /// Maximum Lloyd iterations.
    pub iters: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            k: 256,
            d: 16,
            p: 8,
            iters: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TokenizerReport {
    /// Mean squared latent-to-centroid distance after the last Lloyd iteration.
    pub quantization_distortion: f64,
    /// Per-pixel MSE of encode → quantize → decode on the training patches.
    pub reconstruction_mse: f64,
    /// Per-pixel MSE of the best rank-D affine approximation (no quantization).
    pub linear_mse: f64,
    /// k-means objective after seeding and after every Lloyd iteration.
    pub kmeans_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    p: usize,
    maps: Option<PatchMaps>,
    codebook: Option<Codebook>,
}

impl Tokenizer {
    /// A tokenizer with geometry but no weights; encode/decode report not-ready.
    pub fn untrained(p: usize) -> Self {
        Self {
            p,
            maps: None,
            codebook: None,
        }
    }

    pub fn from_parts(p: usize, maps: PatchMaps, codebook: Codebook) -> Result<Self> {
        let d = maps.enc_w.ncols();
        if maps.enc_w.nrows() != p * p
            || maps.enc_b.len() != d
            || maps.dec_w.dim() != (d, p * p)
            || maps.dec_b.len() != p * p
        {
            return Err(Error::Dimension("patch map shapes inconsistent with p and D".into()));
        }
        if codebook.d() != d {
            return Err(Error::Dimension(format!(
                "codebook dimension {} differs from encoder dimension {d}",
                codebook.d()
            )));
        }
        Ok(Self {
            p,
            maps: Some(maps),
            codebook: Some(codebook),
        })
    }

    pub fn patch_size(&self) -> usize {
        self.p
    }

    pub fn maps(&self) -> Result<&PatchMaps> {
        self.maps
            .as_ref()
            .ok_or_else(|| Error::NotReady("tokenizer encoder/decoder are untrained".into()))
    }

    pub fn codebook(&self) -> Result<&Codebook> {
        self.codebook
            .as_ref()
            .ok_or_else(|| Error::NotReady("tokenizer codebook is untrained".into()))
    }

    pub fn latent_dim(&self) -> Result<usize> {
        Ok(self.maps()?.enc_w.ncols())
    }

    pub fn encode(&self, ch: &Channel) -> Result<LatentGrid> {
        let maps = self.maps()?;
        let patches = patchify(ch, self.p)?;
        let vectors = patches.dot(&maps.enc_w) + &maps.enc_b;
        LatentGrid::new(ch.height / self.p, ch.width / self.p, vectors)
    }

    pub fn quantize(&self, lat: &LatentGrid) -> Result<(TokenIndices, LatentGrid)> {
        quantize(lat, self.codebook()?)
    }

    pub fn decode(&self, lat: &LatentGrid) -> Result<Channel> {
        let maps = self.maps()?;
        if lat.dim() != maps.dec_w.nrows() {
            return Err(Error::Dimension(format!(
                "latent dimension {} does not match decoder input {}",
                lat.dim(),
                maps.dec_w.nrows()
            )));
        }
        let patches = lat.vectors.dot(&maps.dec_w) + &maps.dec_b;
        unpatchify(&patches, lat.grid_h * self.p, lat.grid_w * self.p, self.p)
    }

    /// encode → quantize → decode.
    pub fn round_trip(&self, ch: &Channel) -> Result<Channel> {
        let (_, snapped) = self.quantize(&self.encode(ch)?)?;
        self.decode(&snapped)
    }

    pub fn tokens(&self, ch: &Channel) -> Result<TokenIndices> {
        Ok(self.quantize(&self.encode(ch)?)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let maps = self.maps()?;
        let cb = self.codebook()?;
        let file = TokenizerFile {
            k: cb.k(),
            d: cb.d(),
            p: self.p,
            entries: f64s_to_base64(cb.entries.as_standard_layout().as_slice().unwrap()),
            enc_w: f64s_to_base64(maps.enc_w.as_standard_layout().as_slice().unwrap()),
            enc_b: f64s_to_base64(maps.enc_b.as_slice().unwrap()),
            dec_w: f64s_to_base64(maps.dec_w.as_standard_layout().as_slice().unwrap()),
            dec_b: f64s_to_base64(maps.dec_b.as_slice().unwrap()),
        };
        write_atomic(path, serde_json::to_string_pretty(&file)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let file: TokenizerFile = serde_json::from_slice(&std::fs::read(path)?)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let (k, d, pp) = (file.k, file.d, file.p * file.p);
        let arr2 = |s: &str, r: usize, c: usize| -> Result<Array2<f64>> {
            let v = f64s_from_base64(s).map_err(bad)?;
            Array2::from_shape_vec((r, c), v).map_err(|e| bad(e.to_string()))
        };
        let arr1 = |s: &str, n: usize| -> Result<Array1<f64>> {
            let v = f64s_from_base64(s).map_err(bad)?;
            if v.len() != n {
                return Err(bad(format!("expected {n} values, got {}", v.len())));
            }
            Ok(Array1::from(v))
        };
        let maps = PatchMaps {
            enc_w: arr2(&file.enc_w, pp, d)?,
            enc_b: arr1(&file.enc_b, d)?,
            dec_w: arr2(&file.dec_w, d, pp)?,
            dec_b: arr1(&file.dec_b, pp)?,
        };
        let cb = Codebook::new(arr2(&file.entries, k, d)?)?;
        Self::from_parts(file.p, maps, cb)
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    p: usize,
    entries: String,
    enc_w: String,
    enc_b: String,
    dec_w: String,
    dec_b: String,
}

/// Fits encoder, codebook and decoder to the patches of `dataset`.
pub fn train_tokenizer(dataset: &[Channel], cfg: &TokenizerConfig) -> Result<(Tokenizer, TokenizerReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("tokenizer training set is empty".into()));
    }
    let (p, d) = (cfg.p, cfg.d);
    if d == 0 || d > p * p {
        return Err(Error::InvalidConfig(format!(
            "latent dimension {d} must lie in [1, p² = {}]",
            p * p
        )));
    }
    let blocks = dataset
        .iter()
        .map(|ch| patchify(ch, p))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let patches = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Internal(e.to_string()))?;
    let n = patches.nrows();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::InvalidConfig(format!(
            "codebook size {} must lie in [1, {n}] (number of training patches)",
            cfg.k
        )));
    }
    let mean = patches.mean_axis(Axis(0)).unwrap();
    let centered = &patches - &mean;
    if centered.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateData("all training patches are identical".into()));
    }

    // principal subspace of the patch covariance
    let cov = centered.t().dot(&centered) / n as f64;
    let pp = p * p;
    let eig = SymmetricEigen::new(DMatrix::from_fn(pp, pp, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..pp).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut enc_w = Array2::zeros((pp, d));
    for (col, &src) in order.iter().take(d).enumerate() {
        let v = eig.eigenvectors.column(src);
        // fix the sign so the largest-magnitude component is positive
        let pivot = (0..pp).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..pp {
            enc_w[[i, col]] = sign * v[i];
        }
    }
    let enc_b = -mean.dot(&enc_w);
    let latents = patches.dot(&enc_w) + &enc_b;
    let linear_recon = latents.dot(&enc_w.t()) + &mean;
    let linear_mse = mse(&linear_recon, &patches);

    let (centroids, trace) = kmeans(&latents, cfg.k, cfg.iters, cfg.seed)?;
    let codebook = Codebook::new(centroids)?;
    let assign: Vec<usize> = latents.outer_iter().map(|v| codebook.nearest(v)).collect();
    let snapped = lookup(&assign, &codebook);

    let (dec_w, dec_b) = fit_affine(&snapped, &patches);
    let maps = PatchMaps {
        enc_w,
        enc_b,
        dec_w,
        dec_b,
    };
    let recon = snapped.dot(&maps.dec_w) + &maps.dec_b;
    let report = TokenizerReport {
        quantization_distortion: *trace.last().unwrap(),
        reconstruction_mse: mse(&recon, &patches),
        linear_mse,
        kmeans_trace: trace,
    };
    Ok((Tokenizer::from_parts(p, maps, codebook)?, report))
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap()
}

/// Least-squares affine map `inputs · W + b ≈ targets`, solved through the
/// pseudo-inverse of the normal equations so rank-deficient inputs are fine.
fn fit_affine(inputs: &Array2<f64>, targets: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = inputs.dim();
    let m = targets.ncols();
    let mut aug = Array2::ones((n, d + 1));
    aug.slice_mut(s![.., ..d]).assign(inputs);
    let ata = aug.t().dot(&aug);
    let atb = aug.t().dot(targets);
    let ata = DMatrix::from_fn(d + 1, d + 1, |i, j| ata[[i, j]]);
    let pinv = ata.pseudo_inverse(1e-12).expect("pseudo-inverse with positive eps");
    let pinv = Array2::from_shape_fn((d + 1, d + 1), |(i, j)| pinv[(i, j)]);
    let sol = pinv.dot(&atb);
    let w = sol.slice(s![..d, ..]).to_owned();
    let b = sol.row(d).to_owned();
    debug_assert_eq!(w.dim(), (d, m));
    (w, b)
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign_all(points: &Array2<f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    let rows: Vec<_> = points.outer_iter().collect();
    rows.par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.outer_iter().enumerate() {
                let d = sq_dist(*p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Returns the centroids and the mean squared distortion after seeding and
/// after each iteration. Stops after `iters` iterations or when the relative
/// change in distortion drops below 1e-6. An empty cluster is reseeded to the
/// point farthest from its current centroid.
pub fn kmeans(points: &Array2<f64>, k: usize, iters: usize, seed: u64) -> Result<(Array2<f64>, Vec<f64>)> {
    let (n, d) = points.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateData(format!(
                "only {c} distinct latents available for a codebook of size {k}"
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // guard against landing on a zero-weight point through rounding
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&w| w > 0.0).unwrap();
        }
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            let dn = sq_dist(p, centroids.row(c));
            if dn < d2[i] {
                d2[i] = dn;
            }
        }
    }

    let mut assign = assign_all(points, &centroids);
    let mut trace = vec![assign.iter().map(|a| a.1).sum::<f64>() / n as f64];
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &points.row(i);
            counts[c] += 1;
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let row = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&row);
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(b.cmp(&a)))
                    .unwrap();
                taken[far] = true;
                centroids.row_mut(c).assign(&points.row(far));
            }
        }
        assign = assign_all(points, &centroids);
        let obj = assign.iter().map(|a| a.1).sum::<f64>() / n as f64;
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if prev == 0.0 || (prev - obj).abs() / prev < 1e-6 {
            break;
        }
    }
    Ok((centroids, trace))
}
