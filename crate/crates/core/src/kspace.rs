//! Complex images, centered k-space, Cartesian line masks and the acquisition
//! forward model `y = M ⊙ (F x + η)`.
//!
//! Conventions used throughout the crate:
//! * grids are row-major, `data[r * width + c]`;
//! * the 2D DFT is unitary and centered in both domains
//!   (`fftshift(fft2(ifftshift(x))) / sqrt(H W)`), so the DC coefficient sits
//!   at `(H / 2, W / 2)`;
//! * a phase-encoding line is one full row of the centered k-space grid. Images
//!   whose phase-encoding direction is the second axis must be transposed on
//!   ingest.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! complex_grid {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Row-major H×W grid of complex ", $what, ".")]
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            height: usize,
            width: usize,
            data: Vec<Complex64>,
        }

        impl $name {
            pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
                if height == 0 || width == 0 {
                    return Err(Error::Dimension(format!(
                        "grid dimensions must be positive, got {height}x{width}"
                    )));
                }
                if data.len() != height * width {
                    return Err(Error::Dimension(format!(
                        "expected {} values for a {height}x{width} grid, got {}",
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
                    data: vec![Complex64::new(0.0, 0.0); height * width],
                }
            }

            /// Builds a grid from separate real and imaginary planes.
            pub fn from_parts(height: usize, width: usize, re: &[f64], im: &[f64]) -> Result<Self> {
                if re.len() != im.len() {
                    return Err(Error::Dimension(format!(
                        "real/imaginary plane lengths differ: {} vs {}",
                        re.len(),
                        im.len()
                    )));
                }
                let data = re
                    .iter()
                    .zip(im)
                    .map(|(&a, &b)| Complex64::new(a, b))
                    .collect();
                Self::new(height, width, data)
            }

            pub fn from_real(height: usize, width: usize, re: &[f64]) -> Result<Self> {
                let data = re.iter().map(|&a| Complex64::new(a, 0.0)).collect();
                Self::new(height, width, data)
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn data(&self) -> &[Complex64] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [Complex64] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<Complex64> {
                self.data
            }

            pub fn get(&self, row: usize, col: usize) -> Complex64 {
                self.data[row * self.width + col]
            }

            pub fn set(&mut self, row: usize, col: usize, v: Complex64) {
                self.data[row * self.width + col] = v;
            }

            pub fn row(&self, row: usize) -> &[Complex64] {
                &self.data[row * self.width..(row + 1) * self.width]
            }

            pub fn real_part(&self) -> Vec<f64> {
                self.data.iter().map(|z| z.re).collect()
            }

            pub fn imag_part(&self) -> Vec<f64> {
                self.data.iter().map(|z| z.im).collect()
            }

            pub fn magnitude(&self) -> Vec<f64> {
                self.data.iter().map(|z| z.norm()).collect()
            }

            pub fn norm(&self) -> f64 {
                self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            }

            fn check_finite(&self) -> Result<()> {
                if self.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(concat!("non-finite value in ", $what).into()))
                }
            }
        }
    };
}

complex_grid!(ComplexImage, "image intensities");
complex_grid!(KSpace, "spatial-frequency coefficients");

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place centered unitary 2D DFT on a row-major buffer.
pub(crate) fn centered_fft2(data: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    ifftshift2(data, height, width);
    let row_fft = plan(width, inverse);
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = plan(height, inverse);
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
    let scale = 1.0 / ((height * width) as f64).sqrt();
    for z in data.iter_mut() {
        *z *= scale;
    }
    fftshift2(data, height, width);
}

fn shift2(data: &mut [Complex64], height: usize, width: usize, dr: usize, dc: usize) {
    let src = data.to_vec();
    for r in 0..height {
        let rr = (r + dr) % height;
        for c in 0..width {
            let cc = (c + dc) % width;
            data[rr * width + cc] = src[r * width + c];
        }
    }
}

/// Moves index 0 to index `n / 2` along both axes.
fn fftshift2(data: &mut [Complex64], height: usize, width: usize) {
    shift2(data, height, width, height / 2, width / 2);
}

/// Moves index `n / 2` to index 0 along both axes.
fn ifftshift2(data: &mut [Complex64], height: usize, width: usize) {
    shift2(data, height, width, height - height / 2, width - width / 2);
}

pub fn forward_fft(img: &ComplexImage) -> Result<KSpace> {
    img.check_finite()?;
    let mut data = img.data.clone();
    centered_fft2(&mut data, img.height, img.width, false);
    KSpace::new(img.height, img.width, data)
}

pub fn inverse_fft(ksp: &KSpace) -> Result<ComplexImage> {
    ksp.check_finite()?;
    let mut data = ksp.data.clone();
    centered_fft2(&mut data, ksp.height, ksp.width, true);
    ComplexImage::new(ksp.height, ksp.width, data)
}

/// Binary per-line Cartesian sampling mask over the phase-encoding (row) axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MaskFile", try_from = "MaskFile")]
pub struct SamplingMask {
    flags: Vec<bool>,
    center_count: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    num_lines: usize,
    flags: Vec<u8>,
    center_count: usize,
}

impl From<SamplingMask> for MaskFile {
    fn from(m: SamplingMask) -> Self {
        MaskFile {
            num_lines: m.flags.len(),
            flags: m.flags.iter().map(|&f| f as u8).collect(),
            center_count: m.center_count,
        }
    }
}

impl TryFrom<MaskFile> for SamplingMask {
    type Error = String;

    fn try_from(f: MaskFile) -> std::result::Result<Self, String> {
        if f.flags.len() != f.num_lines {
            return Err(format!(
                "num_lines = {} but {} flags given",
                f.num_lines,
                f.flags.len()
            ));
        }
        if f.center_count > f.num_lines {
            return Err("center_count exceeds num_lines".into());
        }
        let flags = f
            .flags
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(format!("mask flag must be 0 or 1, got {other}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(SamplingMask {
            flags,
            center_count: f.center_count,
        })
    }
}

impl SamplingMask {
    pub fn empty(num_lines: usize) -> Self {
        Self {
            flags: vec![false; num_lines],
            center_count: 0,
        }
    }

    pub fn full(num_lines: usize) -> Self {
        Self {
            flags: vec![true; num_lines],
            center_count: 0,
        }
    }

    pub fn from_lines(num_lines: usize, lines: &[usize]) -> Result<Self> {
        let mut m = Self::empty(num_lines);
        m.insert_lines(lines)?;
        Ok(m)
    }

    pub fn num_lines(&self) -> usize {
        self.flags.len()
    }

    pub fn center_count(&self) -> usize {
        self.center_count
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_sampled(&self, line: usize) -> bool {
        self.flags[line]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn sampled_lines(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&j| self.flags[j]).collect()
    }

    pub fn unsampled_lines(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&j| !self.flags[j]).collect()
    }

    /// Cumulative update `M_t = M_{t-1} ∪ ΔM_t`.
    pub fn insert_lines(&mut self, lines: &[usize]) -> Result<()> {
        for &j in lines {
            if j >= self.flags.len() {
                return Err(Error::Dimension(format!(
                    "line {j} out of range for a {}-line mask",
                    self.flags.len()
                )));
            }
            self.flags[j] = true;
        }
        Ok(())
    }

    pub fn union(&self, other: &SamplingMask) -> Result<SamplingMask> {
        if self.num_lines() != other.num_lines() {
            return Err(Error::Dimension("mask lengths differ".into()));
        }
        Ok(SamplingMask {
            flags: self
                .flags
                .iter()
                .zip(&other.flags)
                .map(|(&a, &b)| a || b)
                .collect(),
            center_count: self.center_count.max(other.center_count),
        })
    }

    /// True when every line flagged in `other` is also flagged here.
    pub fn contains(&self, other: &SamplingMask) -> bool {
        self.flags.len() == other.flags.len()
            && self.flags.iter().zip(&other.flags).all(|(&a, &b)| a || !b)
    }

    /// Zeroes every unsampled line of `ksp`.
    pub fn apply(&self, ksp: &KSpace) -> Result<KSpace> {
        self.check_shape(ksp.height())?;
        let mut out = ksp.clone();
        let w = out.width();
        for (j, row) in out.data_mut().chunks_exact_mut(w).enumerate() {
            if !self.flags[j] {
                row.fill(Complex64::new(0.0, 0.0));
            }
        }
        Ok(out)
    }

    fn check_shape(&self, height: usize) -> Result<()> {
        if self.flags.len() != height {
            return Err(Error::Dimension(format!(
                "mask has {} lines but the phase-encoding axis has {height}",
                self.flags.len()
            )));
        }
        Ok(())
    }
}

/// Per-component standard deviation and seed of the complex Gaussian noise η.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: 0.0, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self::default()
    }

    /// Noise realisation on one phase-encoding line. It depends only on
    /// `(seed, line)`, so re-measuring a line reproduces the same draw.
    pub fn line_noise(&self, line: usize, width: usize) -> Vec<Complex64> {
        if self.sigma == 0.0 {
            return vec![Complex64::new(0.0, 0.0); width];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(line as u64);
        (0..width)
            .map(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(self.sigma * re, self.sigma * im)
            })
            .collect()
    }
}

/// Acquisition forward model: `M ⊙ (F x + η)`, with unsampled entries exactly zero.
pub fn acquire(img: &ComplexImage, mask: &SamplingMask, noise: &NoiseSpec) -> Result<KSpace> {
    mask.check_shape(img.height())?;
    if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {}", noise.sigma)));
    }
    let full = forward_fft(img)?;
    let w = full.width();
    let mut out = KSpace::zeros(full.height(), w);
    for j in mask.sampled_lines() {
        let eta = noise.line_noise(j, w);
        let src = full.row(j);
        let dst = &mut out.data_mut()[j * w..(j + 1) * w];
        for ((d, s), e) in dst.iter_mut().zip(src).zip(eta) {
            *d = s + e;
        }
    }
    Ok(out)
}

/// Zero-filled image: the inverse transform of already-masked k-space.
pub fn zero_fill(ksp: &KSpace) -> Result<ComplexImage> {
    inverse_fft(ksp)
}

fn check_fraction(rho_c: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho_c) {
        return Err(Error::InvalidConfig(format!(
            "center fraction must lie in [0, 1], got {rho_c}"
        )));
    }
    Ok(())
}

/// Number of always-acquired center lines, `round(num_lines · rho_c)`.
///
/// `f64::round` rounds half away from zero, which is the rounding rule used
/// for both the center block and the budget.
pub fn center_line_count(num_lines: usize, rho_c: f64) -> Result<usize> {
    check_fraction(rho_c)?;
    Ok(((num_lines as f64) * rho_c).round() as usize)
}

pub fn make_center_mask(num_lines: usize, rho_c: f64) -> Result<SamplingMask> {
    if num_lines == 0 {
        return Err(Error::InvalidConfig("num_lines must be >= 1".into()));
    }
    let n = center_line_count(num_lines, rho_c)?.min(num_lines);
    let dc = num_lines / 2;
    let start = dc - n / 2;
    let mut flags = vec![false; num_lines];
    flags[start..start + n].fill(true);
    Ok(SamplingMask {
        flags,
        center_count: n,
    })
}

/// Non-central line budget `round(num_lines · (1 − rho_c) / R)`.
pub fn sampling_budget(num_lines: usize, accel: usize, rho_c: f64) -> Result<usize> {
    if accel == 0 {
        return Err(Error::InvalidConfig("acceleration factor must be >= 1".into()));
    }
    check_fraction(rho_c)?;
    Ok(((num_lines as f64) * (1.0 - rho_c) / accel as f64).round() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexImage::new(h, w, data).unwrap()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut img = ComplexImage::zeros(4, 4);
        // spatial origin of the centered convention
        img.set(2, 2, Complex64::new(1.0, 0.0));
        let k = forward_fft(&img).unwrap();
        for z in k.data() {
            assert!((z.norm() - 0.25).abs() < 1e-15);
        }
        let mut corner = ComplexImage::zeros(4, 4);
        corner.set(0, 0, Complex64::new(1.0, 0.0));
        for z in forward_fft(&corner).unwrap().data() {
            assert!((z.norm() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_image_is_dc_only() {
        let (h, w, c) = (6, 10, 1.5);
        let img = ComplexImage::from_real(h, w, &vec![c; h * w]).unwrap();
        let k = forward_fft(&img).unwrap();
        for r in 0..h {
            for col in 0..w {
                let z = k.get(r, col);
                if (r, col) == (h / 2, w / 2) {
                    assert!((z.re - c * ((h * w) as f64).sqrt()).abs() < 1e-12);
                    assert!(z.im.abs() < 1e-12);
                } else {
                    assert!(z.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dc_only_inverts_to_ones() {
        let (h, w) = (8, 4);
        let mut k = KSpace::zeros(h, w);
        k.set(h / 2, w / 2, Complex64::new(((h * w) as f64).sqrt(), 0.0));
        let img = inverse_fft(&k).unwrap();
        for z in img.data() {
            assert!((z.re - 1.0).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
        let zero = inverse_fft(&KSpace::zeros(h, w)).unwrap();
        assert!(zero.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = random_image(16, 16, 3);
        let k = forward_fft(&x).unwrap();
        assert!((k.norm() - x.norm()).abs() < 1e-12 * x.norm());
        let back = inverse_fft(&k).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut x = random_image(4, 4, 1);
        x.set(1, 1, Complex64::new(f64::NAN, 0.0));
        assert!(matches!(forward_fft(&x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn odd_sizes_round_trip() {
        let x = random_image(5, 7, 9);
        let back = inverse_fft(&forward_fft(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn acquire_full_and_empty_masks() {
        let x = random_image(8, 8, 2);
        let full = acquire(&x, &SamplingMask::full(8), &NoiseSpec::noiseless()).unwrap();
        assert_eq!(full, forward_fft(&x).unwrap());
        let empty = acquire(&x, &SamplingMask::empty(8), &NoiseSpec::noiseless()).unwrap();
        assert!(empty.data().iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn acquire_half_mask_matches_unmasked_fft() {
        let x = random_image(8, 6, 5);
        let mask = SamplingMask::from_lines(8, &[0, 2, 4, 6]).unwrap();
        let y = acquire(&x, &mask, &NoiseSpec::noiseless()).unwrap();
        let k = forward_fft(&x).unwrap();
        for r in 0..8 {
            for c in 0..6 {
                let expect = if r % 2 == 0 { k.get(r, c) } else { Complex64::new(0.0, 0.0) };
                assert_eq!(y.get(r, c), expect);
            }
        }
    }

    #[test]
    fn acquire_shape_mismatch() {
        let x = random_image(8, 8, 2);
        assert!(matches!(
            acquire(&x, &SamplingMask::full(6), &NoiseSpec::noiseless()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn noise_only_on_sampled_lines_and_cached_per_line() {
        let x = random_image(8, 8, 7);
        let noise = NoiseSpec { sigma: 0.3, seed: 11 };
        let m1 = SamplingMask::from_lines(8, &[1, 3]).unwrap();
        let m2 = SamplingMask::from_lines(8, &[1, 3, 5]).unwrap();
        let y1 = acquire(&x, &m1, &noise).unwrap();
        let y2 = acquire(&x, &m2, &noise).unwrap();
        assert_eq!(y1.row(1), y2.row(1));
        assert_eq!(y1.row(3), y2.row(3));
        assert!(y1.row(5).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn zero_fill_of_full_noiseless_acquisition_is_identity() {
        let x = random_image(8, 8, 4);
        let y = acquire(&x, &SamplingMask::full(8), &NoiseSpec::noiseless()).unwrap();
        let back = zero_fill(&y).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-10);
        }
        let none = zero_fill(&acquire(&x, &SamplingMask::empty(8), &NoiseSpec::noiseless()).unwrap()).unwrap();
        assert!(none.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn center_mask_counts() {
        let m = make_center_mask(320, 0.04).unwrap();
        assert_eq!(m.center_count(), 13);
        assert_eq!(m.count(), 13);
        assert_eq!(m.sampled_lines(), (154..167).collect::<Vec<_>>());
        assert_eq!(make_center_mask(320, 0.0).unwrap().count(), 0);
        assert_eq!(make_center_mask(320, 1.0).unwrap().count(), 320);
        assert_eq!(make_center_mask(7, 1.0).unwrap().count(), 7);
        assert!(matches!(make_center_mask(10, 1.5), Err(Error::InvalidConfig(_))));
        assert!(matches!(make_center_mask(10, -0.1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn center_mask_contains_dc() {
        for n in 1..40 {
            for rho in [0.04, 0.1, 0.25, 0.5] {
                let m = make_center_mask(n, rho).unwrap();
                if m.center_count() > 0 {
                    assert!(m.is_sampled(n / 2));
                    let lines = m.sampled_lines();
                    assert_eq!(lines.last().unwrap() - lines[0] + 1, lines.len());
                }
            }
        }
    }

    #[test]
    fn budgets() {
        assert_eq!(sampling_budget(320, 8, 0.04).unwrap(), 38);
        assert_eq!(sampling_budget(256, 16, 0.04).unwrap(), 15);
        assert_eq!(sampling_budget(123, 1, 0.0).unwrap(), 123);
        assert_eq!(sampling_budget(64, 8, 0.04).unwrap(), 8);
        assert!(sampling_budget(64, 0, 0.04).is_err());
    }

    #[test]
    fn mask_json_shape() {
        let m = make_center_mask(8, 0.25).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"num_lines":8,"flags":[0,0,0,1,1,0,0,0],"center_count":2}"#);
        let back: SamplingMask = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<SamplingMask>(r#"{"num_lines":3,"flags":[0,1],"center_count":0}"#).is_err());
        assert!(serde_json::from_str::<SamplingMask>(r#"{"num_lines":2,"flags":[0,2],"center_count":0}"#).is_err());
    }

    #[test]
    fn union_is_cumulative() {
        let a = SamplingMask::from_lines(6, &[0, 1]).unwrap();
        let b = SamplingMask::from_lines(6, &[1, 4]).unwrap();
        let u = a.union(&b).unwrap();
        assert_eq!(u.sampled_lines(), vec![0, 1, 4]);
        assert!(u.contains(&a) && u.contains(&b));
        assert!(!a.contains(&u));
    }
}
