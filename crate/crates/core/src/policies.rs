//! Sequential line acquisition and the Random, LES and GEO selection rules.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward_to_kspace, forward_pipeline, line_gradient_scores, QuantMode};
use crate::kspace::{acquire, forward_fft, make_center_mask, sampling_budget, ComplexImage, NoiseSpec, SamplingMask};
use crate::metrics::nmse_complex;
use crate::model::{predicted_tokens, reconstruct, LatentModel, TokenDistribution};
use crate::tokenizer::{Channel, ChannelStats, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Random,
    Les,
    Geo,
    Oracle,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Les => "les",
            Policy::Geo => "geo",
            Policy::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Policy::Random),
            "les" => Ok(Policy::Les),
            "geo" => Ok(Policy::Geo),
            "oracle" => Ok(Policy::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown policy {other:?}"))),
        }
    }
}

/// Per-position entropy (nats) summed over both streams, on the latent grid.
pub fn patch_entropy(dist_re: &TokenDistribution, dist_im: &TokenDistribution) -> Result<Array2<f64>> {
    if (dist_re.grid_h, dist_re.grid_w) != (dist_im.grid_h, dist_im.grid_w) {
        return Err(Error::Geometry("stream grids differ".into()));
    }
    let h: Vec<f64> = dist_re
        .entropies()
        .iter()
        .zip(dist_im.entropies())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Array2::from_shape_vec((dist_re.grid_h, dist_re.grid_w), h).unwrap())
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(h: &Array2<f64>, height: usize, width: usize) -> Result<Array2<f64>> {
    let (gh, gw) = h.dim();
    if gh == 0 || gw == 0 || height % gh != 0 || width % gw != 0 {
        return Err(Error::Geometry(format!(
            "a {gh}x{gw} grid does not divide a {height}x{width} image"
        )));
    }
    let taps = |out: usize, n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .take(out)
            .collect()
    };
    let rows = taps(height, gh, height);
    let cols = taps(width, gw, width);
    Ok(Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = h[[r0, c0]] * (1.0 - fc) + h[[r0, c1]] * fc;
        let bot = h[[r1, c0]] * (1.0 - fc) + h[[r1, c1]] * fc;
        top * (1.0 - fr) + bot * fr
    }))
}

/// `|F(U_space)|` element-wise.
pub fn entropy_kspace(u_space: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = u_space.dim();
    let img = ComplexImage::from_real(h, w, u_space.as_standard_layout().as_slice().unwrap())?;
    let k = forward_fft(&img)?;
    Ok(Array2::from_shape_vec((h, w), k.magnitude()).unwrap())
}

/// Mean of each line (row) of a k-space map.
pub fn line_means(map: &Array2<f64>) -> Vec<f64> {
    let w = map.ncols() as f64;
    map.rows().into_iter().map(|r| r.sum() / w).collect()
}

/// The `n` highest-scoring lines not yet acquired, best first; ties go to the lower index.
pub fn top_unacquired(scores: &[f64], acquired: &SamplingMask, n: usize) -> Result<Vec<usize>> {
    if scores.len() != acquired.num_lines() {
        return Err(Error::Dimension(format!(
            "{} scores for {} lines",
            scores.len(),
            acquired.num_lines()
        )));
    }
    let mut free = acquired.unsampled_lines();
    if free.len() < n {
        return Err(Error::BudgetExhausted {
            requested: n,
            available: free.len(),
        });
    }
    free.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    free.truncate(n);
    Ok(free)
}

/// LES: lines ranked by the mean magnitude of the k-space entropy map.
pub fn les_select(u_kspace: &Array2<f64>, acquired: &SamplingMask, n: usize) -> Result<Vec<usize>> {
    top_unacquired(&line_means(u_kspace), acquired, n)
}

/// GEO: lines ranked by their summed gradient magnitude.
pub fn geo_select(line_scores: &[f64], acquired: &SamplingMask, n: usize) -> Result<Vec<usize>> {
    top_unacquired(line_scores, acquired, n)
}

/// Uniform sample of `n` unacquired lines without replacement.
pub fn random_select(acquired: &SamplingMask, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut free = acquired.unsampled_lines();
    if free.len() < n {
        return Err(Error::BudgetExhausted {
            requested: n,
            available: free.len(),
        });
    }
    let (picked, _) = free.partial_shuffle(rng, n);
    Ok(picked.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub accel: usize,
    pub rho_c: f64,
    /// Number of active steps T.
    pub steps: usize,
    /// Lines added per step; `None` spreads the budget as `ceil(total / T)`.
    pub lines_per_step: Option<usize>,
    pub policy: Policy,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            accel: 8,
            rho_c: 0.04,
            steps: 8,
            lines_per_step: None,
            policy: Policy::Random,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

/// Line counts for an acquisition: the center mask, the number of
/// non-center lines to add, and the per-step split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub center: SamplingMask,
    pub total: usize,
    pub per_step: Vec<usize>,
}

impl AcquisitionConfig {
    pub fn schedule(&self, num_lines: usize) -> Result<Schedule> {
        let center = make_center_mask(num_lines, self.rho_c)?;
        let budget = sampling_budget(num_lines, self.accel, self.rho_c)?;
        let total = budget.min(num_lines - center.count());
        let mut per_step = Vec::new();
        if self.steps > 0 && total > 0 {
            let per = match self.lines_per_step {
                Some(0) => return Err(Error::InvalidConfig("lines_per_step must be positive".into())),
                Some(n) => n,
                None => total.div_ceil(self.steps),
            };
            if per * self.steps < total {
                return Err(Error::InvalidConfig(format!(
                    "{} steps of {per} lines cannot spend a budget of {total}",
                    self.steps
                )));
            }
            let mut left = total;
            while left > 0 && per_step.len() < self.steps {
                let n = per.min(left);
                per_step.push(n);
                left -= n;
            }
        }
        Ok(Schedule {
            center,
            total,
            per_step,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lines: Vec<usize>,
    pub mask: SamplingMask,
    /// Per-line scores the policy ranked by (empty for Random).
    pub scores: Vec<f64>,
    /// NMSE of the reconstruction from the mask after this step.
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionTrajectory {
    pub policy: Policy,
    pub center: SamplingMask,
    pub steps: Vec<StepRecord>,
}

impl AcquisitionTrajectory {
    pub fn final_mask(&self) -> &SamplingMask {
        self.steps.last().map(|s| &s.mask).unwrap_or(&self.center)
    }

    /// JSON-lines log, one record per step.
    pub fn log_lines(&self) -> Vec<String> {
        self.steps
            .iter()
            .map(|s| {
                let argmax = if s.scores.is_empty() {
                    serde_json::Value::Null
                } else {
                    serde_json::json!(s.lines[0])
                };
                serde_json::json!({
                    "step": s.step,
                    "policy": self.policy.as_str(),
                    "lines": s.lines,
                    "score_argmax": argmax,
                    "mask_nnz": s.mask.count(),
                })
                .to_string()
            })
            .collect()
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut text = self.log_lines().join("\n");
        text.push('\n');
        crate::io::write_atomic(path, text.as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct AcquisitionOutcome {
    pub trajectory: AcquisitionTrajectory,
    pub reconstruction: ComplexImage,
}

/// A failed acquisition keeps whatever trajectory had been recorded.
#[derive(Debug)]
pub struct AcquisitionFailure {
    pub error: Error,
    pub trajectory: AcquisitionTrajectory,
}

impl From<AcquisitionFailure> for Error {
    fn from(f: AcquisitionFailure) -> Self {
        f.error
    }
}

/// Reconstruction from a measurement: tokenize, predict, decode the argmax tokens.
pub fn reconstruct_from(
    model: &LatentModel,
    tokenizer: &Tokenizer,
    y: &crate::kspace::KSpace,
) -> Result<ComplexImage> {
    let state = forward_pipeline(model, tokenizer, y, QuantMode::StraightThrough)?;
    let (d_re, d_im) = state.distributions()?;
    let cb = tokenizer.codebook()?;
    reconstruct(
        tokenizer,
        &predicted_tokens(&d_re, cb)?,
        &predicted_tokens(&d_im, cb)?,
        state.stats(),
    )
}

/// Scores every line for a model-driven policy from the current measurement.
pub fn score_lines(
    policy: Policy,
    model: &LatentModel,
    tokenizer: &Tokenizer,
    y: &crate::kspace::KSpace,
) -> Result<Vec<f64>> {
    match policy {
        Policy::Les => {
            let state = forward_pipeline(model, tokenizer, y, QuantMode::StraightThrough)?;
            let (d_re, d_im) = state.distributions()?;
            let h = patch_entropy(&d_re, &d_im)?;
            let u = upsample_bilinear(&h, y.height(), y.width())?;
            Ok(line_means(&entropy_kspace(&u)?))
        }
        Policy::Geo => {
            let mut state = forward_pipeline(model, tokenizer, y, QuantMode::StraightThrough)?;
            let g = backward_to_kspace(&mut state)?;
            Ok(line_gradient_scores(&g.magnitude))
        }
        other => Err(Error::InvalidConfig(format!("{other} does not score lines"))),
    }
}

/// Runs the sequential acquisition loop on one ground-truth image.
pub fn run_acquisition(
    ground_truth: &ComplexImage,
    cfg: &AcquisitionConfig,
    model: &LatentModel,
    tokenizer: &Tokenizer,
) -> std::result::Result<AcquisitionOutcome, AcquisitionFailure> {
    let num_lines = ground_truth.height();
    let mut trajectory = AcquisitionTrajectory {
        policy: cfg.policy,
        center: SamplingMask::empty(num_lines),
        steps: Vec::new(),
    };
    let fail = |error: Error, trajectory: &AcquisitionTrajectory| AcquisitionFailure {
        error,
        trajectory: trajectory.clone(),
    };
    if cfg.policy == Policy::Oracle {
        return Err(fail(
            Error::InvalidConfig("the oracle does not acquire lines; use oracle_reconstruct".into()),
            &trajectory,
        ));
    }
    let schedule = match cfg.schedule(num_lines) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, &trajectory)),
    };
    trajectory.center = schedule.center.clone();
    let mut mask = schedule.center.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (step, &n) in schedule.per_step.iter().enumerate() {
        let result = (|| -> Result<StepRecord> {
            let (lines, scores) = if cfg.policy == Policy::Random {
                (random_select(&mask, n, &mut rng)?, Vec::new())
            } else {
                let y = acquire(ground_truth, &mask, &cfg.noise)?;
                let scores = score_lines(cfg.policy, model, tokenizer, &y)?;
                (top_unacquired(&scores, &mask, n)?, scores)
            };
            let mut next = mask.clone();
            next.insert_lines(&lines)?;
            let y = acquire(ground_truth, &next, &cfg.noise)?;
            let recon = reconstruct_from(model, tokenizer, &y)?;
            Ok(StepRecord {
                step,
                lines,
                mask: next,
                scores,
                nmse: nmse_complex(ground_truth, &recon)?,
            })
        })();
        match result {
            Ok(rec) => {
                mask = rec.mask.clone();
                trajectory.steps.push(rec);
            }
            Err(e) => return Err(fail(e, &trajectory)),
        }
    }
    let reconstruction = match acquire(ground_truth, &mask, &cfg.noise)
        .and_then(|y| reconstruct_from(model, tokenizer, &y))
    {
        Ok(r) => r,
        Err(e) => return Err(fail(e, &trajectory)),
    };
    Ok(AcquisitionOutcome {
        trajectory,
        reconstruction,
    })
}

/// Encode, quantize and decode both channels of the fully sampled image.
pub fn oracle_reconstruct(ground_truth: &ComplexImage, tokenizer: &Tokenizer) -> Result<ComplexImage> {
    let (h, w) = (ground_truth.height(), ground_truth.width());
    let mut parts = Vec::with_capacity(2);
    for values in [ground_truth.real_part(), ground_truth.imag_part()] {
        let ch = Channel::new(h, w, values)?;
        let stats = ChannelStats::of(&ch.data);
        parts.push(stats.denormalize(&tokenizer.round_trip(&stats.normalize(&ch))?));
    }
    ComplexImage::from_parts(h, w, &parts[0].data, &parts[1].data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn entropy_map_cases() {
        use crate::model::Stream;
        let one = TokenDistribution::from_probs(Stream::Re, 1, 2, array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(patch_entropy(&one, &one).unwrap().iter().all(|&v| v == 0.0));
        let uni = TokenDistribution::from_logits(Stream::Re, 2, 2, Array2::zeros((4, 256))).unwrap();
        let h = patch_entropy(&uni, &uni).unwrap();
        assert_eq!(h.dim(), (2, 2));
        assert!(h.iter().all(|&v| (v - 2.0 * 256f64.ln()).abs() < 1e-9));
        let half = TokenDistribution::from_probs(Stream::Re, 1, 1, array![[0.5, 0.5, 0.0, 0.0]]).unwrap();
        let zero = TokenDistribution::from_probs(Stream::Im, 1, 1, array![[0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert!((patch_entropy(&half, &zero).unwrap()[[0, 0]] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bilinear_half_pixel() {
        let u = upsample_bilinear(&array![[0.0, 1.0], [0.0, 1.0]], 4, 4).unwrap();
        for r in 0..4 {
            assert_eq!(u.row(r).to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
        }
        let c = upsample_bilinear(&Array2::from_elem((3, 2), 0.7), 12, 8).unwrap();
        assert!(c.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let one = upsample_bilinear(&array![[2.5]], 8, 8).unwrap();
        assert!(one.iter().all(|&v| v == 2.5));
        assert!(matches!(upsample_bilinear(&Array2::zeros((3, 3)), 8, 9), Err(Error::Geometry(_))));
    }

    #[test]
    fn les_picks_the_cosine_frequency() {
        let (n, f) = (32usize, 5usize);
        let u = Array2::from_shape_fn((n, n), |(r, _)| {
            1.0 + (2.0 * std::f64::consts::PI * f as f64 * r as f64 / n as f64).cos()
        });
        let uk = entropy_kspace(&u).unwrap();
        let mask = SamplingMask::from_lines(n, &[n / 2]).unwrap();
        let top = les_select(&uk, &mask, 2).unwrap();
        let mut pair = top.clone();
        pair.sort();
        assert_eq!(pair, vec![n / 2 - f, n / 2 + f]);
        let s = line_means(&uk);
        let (a, b) = (s[n / 2 - f], s[n / 2 + f]);
        let expect_first = if a >= b { n / 2 - f } else { n / 2 + f };
        assert_eq!(top[0], expect_first);
        assert_eq!(les_select(&(&uk * 3.7), &mask, 2).unwrap(), top);
    }

    #[test]
    fn exclusion_and_exhaustion() {
        let mut mask = SamplingMask::full(8);
        mask = SamplingMask::from_lines(8, &mask.sampled_lines().into_iter().filter(|&l| l != 5).collect::<Vec<_>>())
            .unwrap();
        let scores = vec![9.0, 8.0, 7.0, 6.0, 5.0, -1.0, 3.0, 2.0];
        assert_eq!(geo_select(&scores, &mask, 1).unwrap(), vec![5]);
        assert!(matches!(
            geo_select(&scores, &mask, 2),
            Err(Error::BudgetExhausted {
                requested: 2,
                available: 1
            })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_select(&mask, 1, &mut rng).unwrap(), vec![5]);
    }

    #[test]
    fn geo_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let acquired: Vec<usize> = (0..20).filter(|_| rng.random_bool(0.3)).collect();
            let mask = SamplingMask::from_lines(20, &acquired).unwrap();
            let mut oracle: Vec<(f64, usize)> =
                (0..20).filter(|l| !acquired.contains(l)).map(|l| (scores[l], l)).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let n = oracle.len().min(4);
            let want: Vec<usize> = oracle[..n].iter().map(|p| p.1).collect();
            assert_eq!(geo_select(&scores, &mask, n).unwrap(), want);
            let scaled: Vec<f64> = scores.iter().map(|s| s * 0.01).collect();
            assert_eq!(geo_select(&scaled, &mask, n).unwrap(), want);
        }
        let mut g = vec![0.0; 10];
        g[6] = 3.0;
        assert_eq!(geo_select(&g, &SamplingMask::empty(10), 1).unwrap(), vec![6]);
    }

    #[test]
    fn random_is_seeded_and_uniform() {
        let mask = SamplingMask::from_lines(14, &[0, 1, 2, 3]).unwrap();
        let a = random_select(&mask, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_select(&mask, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 14];
        let draws = 10_000;
        for _ in 0..draws {
            counts[random_select(&mask, 1, &mut rng).unwrap()[0]] += 1;
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (l, &c) in counts.iter().enumerate() {
            if l < 4 {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 - mean).abs() <= 3.0 * sd, "line {l}: {c}");
            }
        }
    }

    #[test]
    fn schedule_accounting() {
        let cfg = AcquisitionConfig {
            accel: 8,
            rho_c: 0.04,
            steps: 3,
            ..Default::default()
        };
        let s = cfg.schedule(64).unwrap();
        assert_eq!(s.center.count(), 3);
        assert_eq!(s.total, 8);
        assert_eq!(s.per_step, vec![3, 3, 2]);
        let s = AcquisitionConfig { steps: 20, ..cfg.clone() }.schedule(64).unwrap();
        assert_eq!(s.per_step, vec![1; 8]);
        let s = AcquisitionConfig { steps: 0, ..cfg.clone() }.schedule(64).unwrap();
        assert!(s.per_step.is_empty());
        let full = AcquisitionConfig {
            accel: 1,
            rho_c: 0.0,
            steps: 1,
            ..cfg.clone()
        };
        assert_eq!(full.schedule(16).unwrap().per_step, vec![16]);
        let bad = AcquisitionConfig {
            lines_per_step: Some(1),
            ..cfg
        };
        assert!(matches!(bad.schedule(64), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [Policy::Random, Policy::Les, Policy::Geo, Policy::Oracle] {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("greedy".parse::<Policy>().is_err());
    }
}
