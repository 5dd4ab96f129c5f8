//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::curves::{all_curves, average_curves, write_csv_rows, LatencyCurves, CSV_HEADER};
use crate::data::{inject_manual_neighbor, preprocess, synth_latency_scenes, Sample, SynthLatencySpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::mean_std;
use crate::model::{ModelConfig, Noise, RevModel, Variant};
use crate::nn::Checkpoint;
use crate::train::{
    evaluate, gradcheck_model, load_checkpoint_into, load_dataset, prepare_all, train_model, TrainState,
};

#[derive(Debug, Parser)]
#[command(name = "reverb", version, about = "Reverberation-transform trajectory forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config and REVERB_OUT_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus an epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint stem.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Single-threaded reference path.
        #[arg(long)]
        deterministic: bool,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem (path without .manifest/.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Hypotheses scored (defaults to eval.k, then k_g).
        #[arg(long, short)]
        k: Option<usize>,
        /// Draw generations with replacement instead of taking the first k.
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Export reverberation curves for test samples.
    Curves {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem (path without .manifest/.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only samples of this scene.
        #[arg(long)]
        scene: Option<String>,
        /// At most this many samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Inject a constant-velocity neighbor: offset and velocity.
        #[arg(long, num_args = 4, value_names = ["DX", "DY", "VX", "VY"], allow_negative_numbers = true)]
        manual_neighbor: Option<Vec<f64>>,
    },
    /// Train and evaluate every ablation variant over every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (defaults to ablate.variants).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Write synthetic latency scenes and their labels.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the model gradient on a toy scene.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Probed entries per tensor; all when omitted.
        #[arg(long)]
        per_param: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env();
            c
        }
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metadata(cfg: &RunConfig, seed: u64) -> String {
    format!("# config_hash={} seed={seed}\n", cfg.hash())
}

fn threads(cfg: &RunConfig, deterministic: bool) -> usize {
    if deterministic {
        1
    } else {
        cfg.train.worker_threads()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume, deterministic } => {
            cmd_train(&load_config(&common)?, resume.as_deref(), deterministic)
        }
        Command::Eval { common, checkpoint, k, sample, deterministic } => {
            let cfg = load_config(&common)?;
            let k = k.unwrap_or(cfg.eval_k());
            let sample = sample || cfg.eval.sample;
            let mut probe = cfg.clone();
            probe.eval.k = Some(k);
            probe.eval.sample = sample;
            probe.validate()?;
            cmd_eval(&cfg, &checkpoint, k, sample, deterministic)
        }
        Command::Curves { common, checkpoint, scene, limit, manual_neighbor } => {
            let nb = manual_neighbor.map(|v| ([v[0], v[1]], [v[2], v[3]]));
            cmd_curves(&load_config(&common)?, &checkpoint, scene.as_deref(), limit, nb)
        }
        Command::Ablate { common, variants, deterministic } => {
            let cfg = load_config(&common)?;
            let variants = variants.unwrap_or_else(|| cfg.ablate.variants.clone());
            cmd_ablate(&cfg, &variants, deterministic)
        }
        Command::Synth { common } => cmd_synth(&load_config(&common)?),
        Command::Gradcheck { common, tol, per_param } => {
            let cfg = match &common.config {
                Some(_) => load_config(&common)?.model,
                None => gradcheck_config(),
            };
            cmd_gradcheck(&cfg, tol, per_param)
        }
    }
}

/// Tiny model used by `gradcheck` without a config.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig { t_h: 4, t_f: 6, d: 8, k_g: 4, n_theta: 4, layers: 1, heads: 2, ..ModelConfig::default() }
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, deterministic: bool) -> Result<()> {
    let data = load_dataset(cfg)?;
    if data.train.is_empty() {
        return Err(Error::InsufficientData("configuration yields no training samples".into()));
    }
    let model = RevModel::new(cfg.model.clone(), cfg.seed)?;
    let prepared = prepare_all(&model, &data.train)?;
    let mut state = TrainState::new(model, &cfg.train, cfg.seed);
    let hash = cfg.hash();
    if let Some(stem) = resume {
        let ck = Checkpoint::load(stem)?;
        if ck.meta.get("config_hash").is_some_and(|h| *h != hash) {
            log::warn!("resuming from a checkpoint written under a different configuration");
        }
        state.restore(&ck)?;
        info!("resumed at epoch {}", state.epoch);
    }
    let mut train_cfg = cfg.train.clone();
    if deterministic {
        train_cfg.threads = 1;
    }
    let dir = &cfg.out_dir;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let log_path = dir.join("train_log.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        format!("{}epoch,loss\n", metadata(cfg, cfg.seed))
    };
    while state.epoch < train_cfg.epochs {
        let started = std::time::Instant::now();
        let loss = state.train_epoch(&prepared, &train_cfg)?;
        info!("epoch {} loss {loss:.6} ({:.1}s)", state.epoch, started.elapsed().as_secs_f64());
        let _ = writeln!(log, "{},{loss}", state.epoch);
        write_atomic(&log_path, log.as_bytes())?;
        if train_cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(train_cfg.checkpoint_every) {
            state.checkpoint(&hash).save(&dir.join(format!("epoch_{:04}", state.epoch)))?;
        }
    }
    state.checkpoint(&hash).save(&dir.join("final"))?;
    println!("{}", dir.join("final").display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, k: usize, sample: bool, deterministic: bool) -> Result<()> {
    let mut model = RevModel::new(cfg.model.clone(), cfg.seed)?;
    load_checkpoint_into(&mut model, checkpoint)?;
    let data = load_dataset(cfg)?;
    let report = evaluate(&model, &data.test, cfg, k, sample, threads(cfg, deterministic))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&cfg.out_dir.join("eval.json"), format!("{json}\n").as_bytes())?;
    println!("{json}");
    Ok(())
}

/// Curves of every selected sample plus their mean, as CSV text.
pub fn curves_csv(
    cfg: &RunConfig,
    model: &RevModel,
    samples: &[Sample],
    manual_neighbor: Option<([f64; 2], [f64; 2])>,
) -> Result<String> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples selected for curve export".into()));
    }
    let samples: Vec<Sample> = samples
        .iter()
        .map(|s| {
            let p = preprocess(s);
            match manual_neighbor {
                Some((off, vel)) => inject_manual_neighbor(&p, off, vel, cfg.model.dt),
                None => p,
            }
        })
        .collect();
    let prepared = prepare_all(model, &samples)?;
    let noise = Noise::zeros(&model.config);
    let mut per_agent: Vec<Vec<LatencyCurves>> = Vec::with_capacity(samples.len());
    let mut out = metadata(cfg, cfg.seed);
    let steps = model.config.steps();
    let _ = writeln!(out, "# baseline={}", 1.0 / steps as f64);
    let _ = writeln!(out, "{CSV_HEADER}");
    for (s, prep) in samples.iter().zip(&prepared) {
        let p = model.predict(prep, &noise)?;
        let curves = all_curves(kernel_views(&p.kernels_non), kernel_views(&p.kernels_soc), model.config.n_theta)?;
        write_csv_rows(&mut out, &format!("{}:{}:{}", s.scene, s.agent, s.frame), &curves);
        per_agent.push(curves);
    }
    write_csv_rows(&mut out, "mean", &average_curves(&per_agent)?);
    Ok(out)
}

type KernelViews<'a> = (ndarray::ArrayView2<'a, f64>, Option<ndarray::ArrayView2<'a, f64>>);

fn kernel_views(k: &Option<crate::model::Kernels>) -> Option<KernelViews<'_>> {
    k.as_ref().map(|k| (k.r.view(), k.g.as_ref().map(|g| g.view())))
}

pub fn cmd_curves(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene: Option<&str>,
    limit: Option<usize>,
    manual_neighbor: Option<([f64; 2], [f64; 2])>,
) -> Result<()> {
    let mut model = RevModel::new(cfg.model.clone(), cfg.seed)?;
    load_checkpoint_into(&mut model, checkpoint)?;
    let data = load_dataset(cfg)?;
    let mut selected: Vec<Sample> = data.test.into_iter().filter(|s| scene.is_none_or(|id| s.scene == id)).collect();
    if let Some(n) = limit {
        selected.truncate(n);
    }
    let csv = curves_csv(cfg, &model, &selected, manual_neighbor)?;
    let path = cfg.out_dir.join("curves.csv");
    write_atomic(&path, csv.as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub min_ade: f64,
    pub min_fde: f64,
}

/// Trains and scores each variant for each configured seed.
pub fn run_ablation(cfg: &RunConfig, variants: &[Variant], deterministic: bool) -> Result<Vec<AblationRow>> {
    let data = load_dataset(cfg)?;
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in &cfg.seeds {
            let mut c = cfg.clone();
            c.model = variant.apply(&cfg.model);
            c.seed = seed;
            if deterministic {
                c.train.threads = 1;
            }
            let (model, _) = train_model(&c, &data.train, seed)?;
            let r = evaluate(&model, &data.test, &c, c.eval_k(), c.eval.sample, threads(&c, deterministic))?;
            info!("{variant} seed {seed}: minADE {:.4} minFDE {:.4}", r.overall.min_ade, r.overall.min_fde);
            rows.push(AblationRow { variant, seed, min_ade: r.overall.min_ade, min_fde: r.overall.min_fde });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(cfg: &RunConfig, rows: &[AblationRow]) -> String {
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let mut out = format!("# config_hash={} seeds={}\nvariant,seed,min_ade,min_fde\n", cfg.hash(), seeds.join(";"));
    let mut order: Vec<Variant> = Vec::new();
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.variant, r.seed, r.min_ade, r.min_fde);
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    for v in order {
        let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
        let ade = mean_std(mine.iter().map(|r| r.min_ade)).0;
        let fde = mean_std(mine.iter().map(|r| r.min_fde)).0;
        let _ = writeln!(out, "{v},mean,{ade},{fde}");
    }
    out
}

pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], deterministic: bool) -> Result<()> {
    let rows = run_ablation(cfg, variants, deterministic)?;
    let path = cfg.out_dir.join("ablation.csv");
    write_atomic(&path, ablation_csv(cfg, &rows).as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.data.synth.clone().unwrap_or_else(|| SynthLatencySpec {
        t_h: cfg.model.t_h,
        t_f: cfg.model.t_f,
        dt: cfg.model.dt,
        seed: cfg.seed,
        ..SynthLatencySpec::default()
    });
    let (scenes, labels) = synth_latency_scenes(&spec)?;
    let dir = &cfg.out_dir;
    let mut manifest = String::new();
    let cut = scenes.len().saturating_sub(cfg.data.synth_test_scenes.min(scenes.len() - 1));
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("scenes/{}.txt", s.id);
        s.write(&dir.join(&name))?;
        let _ = writeln!(manifest, "{} {name}", if i < cut { "train" } else { "test" });
    }
    write_atomic(&dir.join("split.txt"), manifest.as_bytes())?;
    let labels_doc = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": spec.seed,
        "spec": spec,
        "labels": labels,
    });
    let text = serde_json::to_string_pretty(&labels_doc).expect("labels serialize");
    write_atomic(&dir.join("labels.json"), format!("{text}\n").as_bytes())?;
    println!("{}", dir.display());
    Ok(())
}

pub fn cmd_gradcheck(cfg: &ModelConfig, tol: f64, per_param: Option<usize>) -> Result<()> {
    let report = gradcheck_model(cfg, 1, per_param)?;
    println!("checked {} entries, max relative error {:.3e}", report.checked, report.max_rel_error);
    if let Some((name, idx, a, n)) = &report.worst {
        println!("worst: {name}[{idx}] analytic {a:.6e} numeric {n:.6e}");
    }
    if report.passes(tol) {
        println!("PASS (tol {tol:e})");
        Ok(())
    } else {
        let (name, _, _, _) = report.worst.unwrap_or_default();
        Err(Error::Numeric {
            param: name,
            msg: format!("gradient check failed: {:.3e} > {tol:e}", report.max_rel_error),
        })
    }
}
