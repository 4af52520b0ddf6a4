//! Image quality metrics on magnitude images, and the per-image report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::ComplexImage;

pub const DEFAULT_PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;

/// A real image on which metrics are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn magnitude_of(img: &ComplexImage) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            data: img.magnitude(),
        }
    }
}

fn same_shape(a: &RealImage, b: &RealImage) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Dimension(format!(
            "images of shape {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `‖ref − est‖² / ‖ref‖²`.
pub fn nmse(reference: &RealImage, est: &RealImage) -> Result<f64> {
    same_shape(reference, est)?;
    let den: f64 = reference.data.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("NMSE of an all-zero reference".into()));
    }
    let num: f64 = reference.data.iter().zip(&est.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}

/// NMSE between the magnitudes of two complex images.
pub fn nmse_complex(reference: &ComplexImage, est: &ComplexImage) -> Result<f64> {
    nmse(&RealImage::magnitude_of(reference), &RealImage::magnitude_of(est))
}

/// `10·log10(max(ref)² / MSE)`, or `cap` when the images are identical.
pub fn psnr(reference: &RealImage, est: &RealImage, cap: f64) -> Result<f64> {
    same_shape(reference, est)?;
    let n = reference.data.len() as f64;
    let mse = reference.data.iter().zip(&est.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(cap);
    }
    let peak = reference.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut run = 0.0;
        for c in 0..w {
            run += f(r * w + c);
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + run;
        }
    }
    s
}

/// Mean local SSIM over every fully contained 7×7 window.
///
/// Local moments use a uniform window with the unbiased `N/(N−1)` covariance
/// correction; the dynamic range is `max(ref) − min(ref)`.
pub fn ssim(reference: &RealImage, est: &RealImage) -> Result<f64> {
    same_shape(reference, est)?;
    let (h, w, win) = (reference.height, reference.width, SSIM_WINDOW);
    if h < win || w < win {
        return Err(Error::Geometry(format!("SSIM needs at least {win}x{win}, got {h}x{w}")));
    }
    let (x, y) = (&reference.data, &est.data);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let dr = max - min;
    let c1 = (0.01 * dr).powi(2);
    let c2 = (0.03 * dr).powi(2);
    let sx = integral(h, w, |i| x[i]);
    let sy = integral(h, w, |i| y[i]);
    let sxx = integral(h, w, |i| x[i] * x[i]);
    let syy = integral(h, w, |i| y[i] * y[i]);
    let sxy = integral(h, w, |i| x[i] * y[i]);
    let box_sum = |s: &[f64], r: usize, c: usize| {
        let w1 = w + 1;
        s[(r + win) * w1 + c + win] - s[r * w1 + c + win] - s[(r + win) * w1 + c] + s[r * w1 + c]
    };
    let np = (win * win) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let mx = box_sum(&sx, r, c) / np;
            let my = box_sum(&sy, r, c) / np;
            let vx = cov_norm * (box_sum(&sxx, r, c) / np - mx * mx);
            let vy = cov_norm * (box_sum(&syy, r, c) / np - my * my);
            let vxy = cov_norm * (box_sum(&sxy, r, c) / np - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - win + 1) * (w - win + 1)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub policy: String,
    pub accel: Option<usize>,
    pub steps: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl MetricRow {
    pub fn evaluate(
        image_id: &str,
        policy: &str,
        accel: Option<usize>,
        steps: Option<usize>,
        reference: &ComplexImage,
        est: &ComplexImage,
        psnr_cap: f64,
    ) -> Result<Self> {
        let (a, b) = (RealImage::magnitude_of(reference), RealImage::magnitude_of(est));
        Ok(Self {
            image_id: image_id.to_string(),
            policy: policy.to_string(),
            accel,
            steps,
            psnr: psnr(&a, &b, psnr_cap)?,
            ssim: ssim(&a, &b)?,
            nmse: nmse(&a, &b)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub accel: Option<usize>,
    pub steps: Option<usize>,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub nmse_mean: f64,
    pub nmse_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-image rows plus per-(policy, R) aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// One summary per `(policy, R, T)` group, in order of first appearance.
    pub fn summaries(&self) -> Vec<Summary> {
        let mut order: Vec<(String, Option<usize>, Option<usize>)> = Vec::new();
        let mut groups: BTreeMap<(String, Option<usize>, Option<usize>), Vec<&MetricRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.policy.clone(), r.accel, r.steps);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let col = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
                let (psnr_mean, psnr_std) = mean_std(&col(|r| r.psnr));
                let (ssim_mean, ssim_std) = mean_std(&col(|r| r.ssim));
                let (nmse_mean, nmse_std) = mean_std(&col(|r| r.nmse));
                Summary {
                    policy: key.0,
                    accel: key.1,
                    steps: key.2,
                    count: rows.len(),
                    psnr_mean,
                    psnr_std,
                    ssim_mean,
                    ssim_std,
                    nmse_mean,
                    nmse_std,
                }
            })
            .collect()
    }

    /// CSV with header `image_id,policy,R,T,psnr,ssim,nmse`; summary rows
    /// carry `mean` as their image id.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("image_id,policy,R,T,psnr,ssim,nmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.image_id,
                r.policy,
                opt(r.accel),
                opt(r.steps),
                r.psnr,
                r.ssim,
                r.nmse
            ));
        }
        for s in self.summaries() {
            out.push_str(&format!(
                "mean,{},{},{},{},{},{}\n",
                s.policy,
                opt(s.accel),
                opt(s.steps),
                s.psnr_mean,
                s.ssim_mean,
                s.nmse_mean
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "rows": self.rows,
            "summary": self.summaries(),
        }))?)
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        crate::io::write_atomic(csv, self.to_csv().as_bytes())?;
        crate::io::write_atomic(json, self.to_json()?.as_bytes())
    }
}
