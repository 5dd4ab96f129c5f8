//! Run configuration.
//!
//! TOML: top-level keys plus `[model]`, `[train]`, `[data]`, `[data.synth]`,
//! `[eval]` and `[ablate]` sections. Every key is optional and unknown keys
//! are rejected. Relative data paths resolve against the config file's
//! directory.
//!
//! ```toml
//! seed = 1
//! seeds = [1, 2, 3, 4, 5]
//! out_dir = "runs/eth"
//!
//! [model]
//! d = 128
//! k_g = 20
//!
//! [train]
//! lr = 3e-4
//! batch_size = 1000
//! epochs = 200
//!
//! [data]
//! split_manifest = "splits/eth.txt"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthLatencySpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};

/// Overrides `out_dir` when set.
pub const OUT_DIR_ENV: &str = "REVERB_OUT_DIR";

pub const MAX_EPOCHS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Write `epoch_NNNN` checkpoints every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Worker threads for gradient computation; 0 means all cores. Results
    /// do not depend on this value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1000,
            epochs: MAX_EPOCHS,
            checkpoint_every: 10,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn worker_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    pub fn adam(&self) -> crate::nn::AdamConfig {
        crate::nn::AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// Adds the manifest's scenes to the lists above.
    pub split_manifest: Option<PathBuf>,
    pub stride: usize,
    /// Generate scenes in memory instead of reading files.
    pub synth: Option<SynthLatencySpec>,
    /// Trailing generated scenes held out for testing.
    pub synth_test_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            split_manifest: None,
            stride: 1,
            synth: None,
            synth_test_scenes: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Hypotheses scored; defaults to `k_g`.
    pub k: Option<usize>,
    /// Draw `k` generation indices with replacement instead of the first `k`.
    pub sample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds of repeated runs (ablations).
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative paths, applies the output-directory
    /// override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.train.iter_mut().chain(d.val.iter_mut()).chain(d.test.iter_mut()).for_each(fix);
        if let Some(m) = d.split_manifest.as_mut() {
            fix(m);
        }
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps.is_nan() || t.eps <= 0.0 {
            return bad("train.beta1/beta2 must lie in [0, 1) and eps must be positive".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if t.epochs == 0 || t.epochs > MAX_EPOCHS {
            return bad(format!("train.epochs must be in 1..={MAX_EPOCHS}, got {}", t.epochs));
        }
        if self.data.stride == 0 {
            return bad("data.stride must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if let Some(k) = self.eval.k {
            if k == 0 || (k > self.model.k_g && !self.eval.sample) {
                return bad(format!("eval.k = {k} needs 1 <= k <= k_g = {} unless eval.sample is set", self.model.k_g));
            }
        }
        if let Some(s) = &self.data.synth {
            s.validate()?;
            if (s.t_h, s.t_f) != (self.model.t_h, self.model.t_f) {
                return bad(format!(
                    "data.synth windows ({}, {}) differ from model ({}, {})",
                    s.t_h, s.t_f, self.model.t_h, self.model.t_f
                ));
            }
            if self.data.synth_test_scenes >= s.scenes {
                return bad("data.synth_test_scenes must leave at least one training scene".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the serialized configuration, ignoring settings that do
    /// not affect results (output directory, thread count).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.train.threads = 0;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn eval_k(&self) -> usize {
        self.eval.k.unwrap_or(self.model.k_g)
    }
}
