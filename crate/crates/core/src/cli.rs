//! Command-line front end: data generation, training, experiments, benchmarks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::ctns;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kspace::{acquire, ComplexImage, NoiseSpec};
use crate::metrics::{MetricReport, MetricRow};
use crate::model::{
    evaluate_loss, Checkpoint, LatentModel, LossRecord, MaskSampler, ModelShape,
};
use crate::phantom::{make_splits, write_dataset, DataManifest, ManifestEntry};
use crate::policies::{
    oracle_reconstruct, random_select, run_acquisition, score_lines, top_unacquired, AcquisitionConfig, Policy,
};
use crate::tokenizer::{train_tokenizer, Channel, ChannelStats, Tokenizer};

#[derive(Debug, Parser)]
#[command(name = "activemri", version, about = "Active k-space line selection with a tokenized latent model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to these policies (repeatable).
    #[arg(long = "policy")]
    pub policies: Vec<String>,
    /// Restrict to these accelerations (repeatable).
    #[arg(long = "accel")]
    pub accels: Vec<usize>,
    /// Number of active steps T.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom splits and their manifest.
    GenData(Common),
    /// Train the tokenizer and latent model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Run acquisition experiments on the test split.
    Run(Common),
    /// Measure per-step selection latency.
    Bench(Common),
    /// Print the effective configuration.
    ShowConfig(Common),
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if !c.policies.is_empty() {
        let ps = c.policies.iter().map(|p| p.parse()).collect::<Result<Vec<Policy>>>()?;
        cfg.bench.policies = ps.iter().copied().filter(|p| matches!(p, Policy::Les | Policy::Geo)).collect();
        cfg.run.policies = ps;
    }
    if !c.accels.is_empty() {
        cfg.run.accels = c.accels.clone();
    }
    if let Some(t) = c.steps {
        cfg.run.steps = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => cmd_gen_data(&resolve_config(&c)?).map(|_| ()),
        Command::Train { common, resume } => {
            let out = cmd_train(&resolve_config(&common)?, resume)?;
            println!("final token cross-entropy: {:.6}", out.final_loss);
            if let Some(v) = out.val_loss {
                println!("validation token cross-entropy: {v:.6}");
            }
            Ok(())
        }
        Command::Run(c) => {
            let report = cmd_run(&resolve_config(&c)?)?;
            for s in report.summaries() {
                println!(
                    "{:<7} R={:<3} nmse {:.6}  psnr {:.3}  ssim {:.4}",
                    s.policy,
                    s.accel.map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
                    s.nmse_mean,
                    s.psnr_mean,
                    s.ssim_mean
                );
            }
            Ok(())
        }
        Command::Bench(c) => {
            for row in cmd_bench(&resolve_config(&c)?)? {
                println!(
                    "{:<4} {} steps  {:.3} ± {:.3} ms/step  total {:.1} ms",
                    row.policy, row.steps, row.mean_ms, row.std_ms, row.total_ms
                );
            }
            Ok(())
        }
        Command::ShowConfig(c) => {
            print!("{}", resolve_config(&c)?.to_toml()?);
            Ok(())
        }
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<DataManifest> {
    let splits = make_splits(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.seed);
    write_dataset(&cfg.data_dir(), &cfg.phantom_spec(), &splits)
}

/// Each channel of each image standardized with its own statistics.
pub fn normalized_channels(images: &[ComplexImage]) -> Result<Vec<Channel>> {
    let mut out = Vec::with_capacity(2 * images.len());
    for img in images {
        for values in [img.real_part(), img.imag_part()] {
            let ch = Channel::new(img.height(), img.width(), values)?;
            out.push(ChannelStats::of(&ch.data).normalize(&ch));
        }
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub trace: Vec<LossRecord>,
    pub final_loss: f64,
    pub val_loss: Option<f64>,
}

fn trace_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for r in trace {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    s
}

fn read_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad trace row {l:?}"),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Fixed validation masks, one per image, at the middle of the training range.
fn validation_pairs(cfg: &ExperimentConfig, images: Vec<ComplexImage>) -> Result<Vec<(ComplexImage, crate::kspace::SamplingMask)>> {
    let accel = (cfg.train.accel_min + cfg.train.accel_max) / 2;
    let sampler = MaskSampler {
        rho_c: cfg.train.rho_c,
        accel_min: accel,
        accel_max: accel,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5641_4c49);
    images
        .into_iter()
        .map(|img| {
            let m = sampler.sample(img.height(), &mut rng)?;
            Ok((img, m))
        })
        .collect()
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainOutcome> {
    let data_dir = cfg.data_dir();
    let manifest = DataManifest::load(&data_dir)?;
    let train = DataManifest::load_images(&data_dir, &manifest.train)?;
    std::fs::create_dir_all(cfg.artifacts_dir())?;
    let tcfg = cfg.train_config();
    let (tokenizer, ckpt, mut trace) = if resume {
        let tok = Tokenizer::load(&cfg.tokenizer_path())?;
        let ck = Checkpoint::load(&cfg.checkpoint_dir())?;
        let trace = read_trace(&cfg.loss_trace_path())?;
        (tok, ck, trace)
    } else {
        let (tok, _) = train_tokenizer(&normalized_channels(&train)?, &cfg.tokenizer_config())?;
        tok.save(&cfg.tokenizer_path())?;
        let shape = ModelShape {
            seq_len: (cfg.data.size / cfg.tokenizer.p).pow(2),
            latent_dim: cfg.tokenizer.d,
            vocab: cfg.tokenizer.k,
        };
        let model = LatentModel::init(cfg.model.clone(), shape, cfg.seed)?;
        (tok, Checkpoint::fresh(model, tcfg.adam.clone()), Vec::new())
    };
    let prior = trace.clone();
    let ckpt_dir = cfg.checkpoint_dir();
    let trace_path = cfg.loss_trace_path();
    let mut io_err = None;
    let result = crate::model::train_model(&train, &tokenizer, &tcfg, ckpt, |ck, t| {
        let mut all = prior.clone();
        all.extend_from_slice(t);
        let r = ck
            .save(&ckpt_dir)
            .and_then(|_| write_atomic(&trace_path, trace_csv(&all).as_bytes()));
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    let (ckpt, new_trace) = match result {
        Ok(r) => r,
        Err(Error::TrainingDiverged { step, loss, last_finite }) => {
            last_finite.save(&ckpt_dir)?;
            return Err(Error::TrainingDiverged { step, loss, last_finite });
        }
        Err(e) => return Err(e),
    };
    trace.extend(new_trace);
    write_atomic(&cfg.loss_trace_path(), trace_csv(&trace).as_bytes())?;
    ckpt.model.save(&cfg.model_dir())?;
    let last_epoch = trace.last().map(|r| r.epoch);
    let last: Vec<f64> = trace.iter().filter(|r| Some(r.epoch) == last_epoch).map(|r| r.loss).collect();
    let final_loss = if last.is_empty() {
        f64::NAN
    } else {
        last.iter().sum::<f64>() / last.len() as f64
    };
    let val_loss = if manifest.val.is_empty() {
        None
    } else {
        let pairs = validation_pairs(cfg, DataManifest::load_images(&data_dir, &manifest.val)?)?;
        Some(evaluate_loss(&ckpt.model, &tokenizer, &pairs)?)
    };
    Ok(TrainOutcome {
        trace,
        final_loss,
        val_loss,
    })
}

/// Trained tokenizer and model from the artifact directory.
pub fn load_artifacts(cfg: &ExperimentConfig) -> Result<(Tokenizer, LatentModel)> {
    let tok_path = cfg.tokenizer_path();
    if !tok_path.exists() {
        return Err(Error::MissingArtifact(tok_path));
    }
    let model_manifest = cfg.model_dir().join("manifest.json");
    if !model_manifest.exists() {
        return Err(Error::MissingArtifact(model_manifest));
    }
    Ok((Tokenizer::load(&tok_path)?, LatentModel::load(&cfg.model_dir())?))
}

/// Seed for one (image, acceleration) pair, shared by every policy.
pub fn trajectory_seed(master: u64, image_index: usize, accel: usize) -> u64 {
    let mut x = master ^ ((image_index as u64) << 20) ^ ((accel as u64) << 48);
    x = x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^ (x >> 29)
}

pub fn acquisition_config(cfg: &ExperimentConfig, policy: Policy, accel: usize, image_index: usize) -> AcquisitionConfig {
    let seed = trajectory_seed(cfg.seed, image_index, accel);
    AcquisitionConfig {
        accel,
        rho_c: cfg.run.rho_c,
        steps: cfg.run.steps,
        lines_per_step: (cfg.run.lines_per_step > 0).then_some(cfg.run.lines_per_step),
        policy,
        noise: NoiseSpec {
            sigma: cfg.run.noise_sigma,
            seed,
        },
        seed,
    }
}

/// Runs every configured `(policy, R)` pair over the test split and writes
/// metrics, trajectories, per-step curves and reconstructions.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let data_dir = cfg.data_dir();
    let manifest = DataManifest::load(&data_dir)?;
    let (tokenizer, model) = load_artifacts(cfg)?;
    let images = DataManifest::load_images(&data_dir, &manifest.test)?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    let cap = cfg.metrics.psnr_cap;
    let mut report = MetricReport::default();
    let mut curves = String::from("image_id,policy,R,T,step,lines_acquired,nmse\n");
    for &accel in &cfg.run.accels {
        for &policy in cfg.run.policies.iter().filter(|p| **p != Policy::Oracle) {
            let tag = format!("{policy}_R{accel}");
            let traj_dir = run_dir.join("trajectories").join(&tag);
            let recon_dir = run_dir.join("reconstructions").join(&tag);
            std::fs::create_dir_all(&traj_dir)?;
            if cfg.run.save_reconstructions {
                std::fs::create_dir_all(&recon_dir)?;
            }
            let results = images
                .par_iter()
                .zip(&manifest.test)
                .enumerate()
                .map(|(i, (img, entry))| {
                    let acfg = acquisition_config(cfg, policy, accel, i);
                    let out = match run_acquisition(img, &acfg, &model, &tokenizer) {
                        Ok(o) => o,
                        Err(f) => {
                            f.trajectory.write_log(&traj_dir.join(format!("{}.jsonl", entry.id)))?;
                            return Err(f.error);
                        }
                    };
                    out.trajectory.write_log(&traj_dir.join(format!("{}.jsonl", entry.id)))?;
                    if cfg.run.save_reconstructions {
                        ctns::write(
                            &recon_dir.join(format!("{}.ctns", entry.id)),
                            &ctns::Tensor::from(&out.reconstruction),
                            ctns::Dtype::F64,
                        )?;
                    }
                    let row = MetricRow::evaluate(
                        &entry.id,
                        policy.as_str(),
                        Some(accel),
                        Some(cfg.run.steps),
                        img,
                        &out.reconstruction,
                        cap,
                    )?;
                    let mut curve = String::new();
                    for s in &out.trajectory.steps {
                        curve.push_str(&format!(
                            "{},{},{},{},{},{},{}\n",
                            entry.id,
                            policy,
                            accel,
                            cfg.run.steps,
                            s.step,
                            s.mask.count() - out.trajectory.center.count(),
                            s.nmse
                        ));
                    }
                    Ok((row, curve))
                })
                .collect::<Result<Vec<_>>>()?;
            for (row, curve) in results {
                report.push(row);
                curves.push_str(&curve);
            }
        }
    }
    if cfg.run.policies.contains(&Policy::Oracle) {
        let recon_dir = run_dir.join("reconstructions").join("oracle");
        if cfg.run.save_reconstructions {
            std::fs::create_dir_all(&recon_dir)?;
        }
        let rows = images
            .par_iter()
            .zip(&manifest.test)
            .map(|(img, entry)| {
                let recon = oracle_reconstruct(img, &tokenizer)?;
                if cfg.run.save_reconstructions {
                    ctns::write(
                        &recon_dir.join(format!("{}.ctns", entry.id)),
                        &ctns::Tensor::from(&recon),
                        ctns::Dtype::F64,
                    )?;
                }
                MetricRow::evaluate(&entry.id, "oracle", None, None, img, &recon, cap)
            })
            .collect::<Result<Vec<_>>>()?;
        for r in rows {
            report.push(r);
        }
    }
    report.write(&run_dir.join("metrics.csv"), &run_dir.join("metrics.json"))?;
    write_atomic(&run_dir.join("curves.csv"), curves.as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub policy: String,
    pub steps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub total_ms: f64,
}

/// Times one selection step (score every line, pick the best) for each
/// benchmarked policy on the same sequence of measurements.
pub fn bench_policies(
    image: &ComplexImage,
    policies: &[Policy],
    steps: usize,
    rho_c: f64,
    seed: u64,
    model: &LatentModel,
    tokenizer: &Tokenizer,
) -> Result<Vec<BenchRow>> {
    let n = image.height();
    let center = crate::kspace::make_center_mask(n, rho_c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(steps);
    let mut mask = center.clone();
    while masks.len() < steps {
        if mask.unsampled_lines().is_empty() {
            mask = center.clone();
        }
        masks.push(mask.clone());
        mask.insert_lines(&random_select(&mask, 1, &mut rng)?)?;
    }
    let inputs = masks
        .iter()
        .map(|m| acquire(image, m, &NoiseSpec::noiseless()))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &policy in policies {
        score_lines(policy, model, tokenizer, &inputs[0])?;
        let mut times = Vec::with_capacity(steps);
        for (y, m) in inputs.iter().zip(&masks) {
            let t = Instant::now();
            let scores = score_lines(policy, model, tokenizer, y)?;
            std::hint::black_box(top_unacquired(&scores, m, 1)?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
        rows.push(BenchRow {
            policy: policy.to_string(),
            steps,
            mean_ms: mean,
            std_ms: var.sqrt(),
            total_ms: times.iter().sum(),
        });
    }
    Ok(rows)
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let data_dir = cfg.data_dir();
    let manifest = DataManifest::load(&data_dir)?;
    let (tokenizer, model) = load_artifacts(cfg)?;
    let first: Vec<ManifestEntry> = manifest.test.iter().take(1).cloned().collect();
    let image = DataManifest::load_images(&data_dir, &first)?
        .pop()
        .ok_or_else(|| Error::InvalidConfig("benchmark needs at least one test image".into()))?;
    let rows = bench_policies(&image, &cfg.bench.policies, cfg.bench.steps, cfg.run.rho_c, cfg.seed, &model, &tokenizer)?;
    let dir = cfg.bench_dir();
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("policy,steps,mean_ms,std_ms,total_ms\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.4},{:.4},{:.4}\n", r.policy, r.steps, r.mean_ms, r.std_ms, r.total_ms));
    }
    write_atomic(&dir.join("latency.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("latency.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    Ok(rows)
}
