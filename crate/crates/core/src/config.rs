//! Declarative experiment configuration (TOML) with centralized defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::NoiseSpec;
use crate::model::{MaskSampler, TrainConfig, TransformerConfig};
use crate::params::AdamConfig;
use crate::phantom::{PhantomSpec, PhaseMode};
use crate::policies::Policy;
use crate::tokenizer::TokenizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub size: usize,
    pub n_ellipses: usize,
    pub intensity: [f64; 2],
    pub phase: PhaseMode,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = PhantomSpec::default();
        Self {
            size: spec.size,
            n_ellipses: spec.n_ellipses,
            intensity: [spec.intensity.0, spec.intensity.1],
            phase: spec.phase,
            n_train: 200,
            n_val: 20,
            n_test: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub k: usize,
    pub d: usize,
    pub p: usize,
    pub iters: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        Self {
            k: t.k,
            d: t.d,
            p: t.p,
            iters: t.iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub accel_min: usize,
    pub accel_max: usize,
    pub rho_c: f64,
    pub noise_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            accel_min: t.masks.accel_min,
            accel_max: t.masks.accel_max,
            rho_c: t.masks.rho_c,
            noise_sigma: t.noise.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub policies: Vec<Policy>,
    pub accels: Vec<usize>,
    pub steps: usize,
    /// Zero means "spread the budget evenly over the steps".
    pub lines_per_step: usize,
    pub rho_c: f64,
    pub noise_sigma: f64,
    /// Write reconstructions of every test image as CTNS files.
    pub save_reconstructions: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            policies: vec![Policy::Random, Policy::Les, Policy::Geo, Policy::Oracle],
            accels: vec![4, 8],
            steps: 8,
            lines_per_step: 0,
            rho_c: 0.04,
            noise_sigma: 0.0,
            save_reconstructions: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub psnr_cap: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            psnr_cap: crate::metrics::DEFAULT_PSNR_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub steps: usize,
    pub policies: Vec<Policy>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            steps: 20,
            policies: vec![Policy::Les, Policy::Geo],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Root of every artifact: `data/`, `artifacts/`, `run/`, `bench/`.
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: TransformerConfig,
    pub train: TrainSection,
    pub run: RunSection,
    pub metrics: MetricsSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataSection::default(),
            tokenizer: TokenizerSection::default(),
            model: TransformerConfig::default(),
            train: TrainSection::default(),
            run: RunSection::default(),
            metrics: MetricsSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(format!("config serialization failed: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.phantom_spec().validate()?;
        let t = &self.tokenizer;
        if t.k == 0 || t.d == 0 || t.p == 0 {
            return Err(Error::InvalidConfig("tokenizer k, d and p must be positive".into()));
        }
        if t.d > t.p * t.p {
            return Err(Error::InvalidConfig(format!("latent dim {} exceeds patch size {}", t.d, t.p * t.p)));
        }
        crate::tokenizer::check_geometry(self.data.size, self.data.size, t.p)?;
        if self.train.batch_size == 0 || self.train.accel_min == 0 || self.train.accel_min > self.train.accel_max {
            return Err(Error::InvalidConfig("train batch_size and acceleration range are invalid".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        for rho in [self.train.rho_c, self.run.rho_c] {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::InvalidConfig(format!("center fraction {rho} outside [0, 1]")));
            }
        }
        for sigma in [self.train.noise_sigma, self.run.noise_sigma] {
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(Error::InvalidConfig("noise sigma must be finite and non-negative".into()));
            }
        }
        if self.run.accels.contains(&0) {
            return Err(Error::InvalidConfig("accelerations must be positive".into()));
        }
        if self.bench.policies.iter().any(|p| !matches!(p, Policy::Les | Policy::Geo)) {
            return Err(Error::InvalidConfig("only les and geo can be benchmarked".into()));
        }
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            size: self.data.size,
            n_ellipses: self.data.n_ellipses,
            intensity: (self.data.intensity[0], self.data.intensity[1]),
            phase: self.data.phase,
            seed: self.seed,
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            k: self.tokenizer.k,
            d: self.tokenizer.d,
            p: self.tokenizer.p,
            iters: self.tokenizer.iters,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            masks: MaskSampler {
                rho_c: self.train.rho_c,
                accel_min: self.train.accel_min,
                accel_max: self.train.accel_max,
            },
            noise: NoiseSpec {
                sigma: self.train.noise_sigma,
                seed: self.seed,
            },
            seed: self.seed,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.out_dir.join("artifacts")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join("run")
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.out_dir.join("bench")
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.artifacts_dir().join("tokenizer.json")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.artifacts_dir().join("model")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.artifacts_dir().join("checkpoint")
    }

    pub fn loss_trace_path(&self) -> PathBuf {
        self.artifacts_dir().join("loss_trace.csv")
    }
}
