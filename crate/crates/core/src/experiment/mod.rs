//! Experiment configs, procedural datasets, end-to-end runs and ablation sweeps.
//!
//! A config is a TOML file whose every key is optional; missing keys take the
//! desk defaults below. Unknown keys are an error that lists all of them.

pub mod dataset;
pub mod plot;
pub mod run;
pub mod sweep;
pub mod toy;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::ParamRanges;
use crate::error::{Error, Result};
use crate::latent::AeTrainConfig;
use crate::lcfm::{FlowConfig, Objective, Source};
use crate::nets::Arch;
use crate::numerics::AdamWConfig;
use crate::restore::RestoreConfig;

pub use dataset::{synth_dataset, DatasetContainer, DatasetSpec, Generator, Record};
pub use run::{run_experiment, run_experiment_with, EpochRow, RunOutcome, METRICS_HEADER};
pub use sweep::{ablate, Ablation, AblationRow, Sweep};

/// Environment variable naming the directory that run outputs are placed under.
pub const OUTPUT_ROOT_VAR: &str = "LATENT_RESTORE_OUT";

/// `$LATENT_RESTORE_OUT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub size: usize,
    pub channels: usize,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    pub generator: Generator,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { size: 16, channels: 1, train: 2048, val: 256, seed: 0, generator: Generator::GaussianBlobs }
    }
}

impl DataConfig {
    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec { size: self.size, channels: self.channels, count: self.train, generator: self.generator }
    }

    pub fn val_spec(&self) -> DatasetSpec {
        DatasetSpec { count: self.val, ..self.train_spec() }
    }

    pub fn val_seed(&self) -> u64 {
        crate::rng::derive(self.seed, "dataset/val")
    }
}

/// Vector field and coarse estimator sizes, and what the field is trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub objective: Objective,
    pub source: Source,
    pub unet_widths: [usize; 3],
    /// Expansion of each collapsible 3×3 layer; 1 stores plain convolutions.
    pub expand: usize,
    pub rrdb_width: usize,
    pub rrdb_growth: usize,
    pub rrdb_blocks: usize,
    pub ema_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { objective: Objective::Lcfm, source: Source::Coarse, unet_widths: [16, 32, 64], expand: 1, rrdb_width: 24, rrdb_growth: 12, rrdb_blocks: 3, ema_decay: 0.999 }
    }
}

impl ModelConfig {
    pub fn field_arch(&self, latent_ch: usize) -> Arch {
        Arch::UNet { ch: latent_ch, widths: self.unet_widths, expand: self.expand }
    }

    pub fn coarse_arch(&self, latent_ch: usize) -> Arch {
        Arch::Rrdb { ch: latent_ch, width: self.rrdb_width, growth: self.rrdb_growth, blocks: self.rrdb_blocks }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: String,
    /// Seeds weight init, batching, ε draws and restoration noise.
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    /// Relative paths are placed under [`output_root`].
    pub output_dir: PathBuf,
    /// Load a trained autoencoder instead of training one.
    pub autoencoder_checkpoint: Option<PathBuf>,
    pub dataset: DataConfig,
    pub ranges: ParamRanges,
    pub flow: FlowConfig,
    pub restore: RestoreConfig,
    pub optim: AdamWConfig,
    pub model: ModelConfig,
    pub autoencoder: AeTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: "desk".into(),
            seed: 0,
            epochs: 30,
            batch: 64,
            output_dir: PathBuf::from("desk"),
            autoencoder_checkpoint: None,
            dataset: DataConfig::default(),
            ranges: ParamRanges::desk(),
            flow: FlowConfig::default(),
            restore: RestoreConfig::default(),
            optim: AdamWConfig::default(),
            model: ModelConfig::default(),
            autoencoder: AeTrainConfig::default(),
        }
    }
}

fn scoped(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { key, message } => Error::config(format!("{prefix}.{key}"), message),
        Error::Contract(message) => Error::config(prefix, message),
        other => other,
    })
}

fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.batch >= 1, "batch", "must be at least 1")?;
        let d = &self.dataset;
        scoped("dataset", d.train_spec().validate())?;
        scoped("dataset", d.val_spec().validate())?;
        check(d.size.is_multiple_of(16), "dataset.size", format!("the desk networks need a multiple of 16, got {}", d.size))?;
        check(d.val <= eval_limit(), "dataset.val", format!("exact W2 handles at most {} images, got {}", eval_limit(), d.val))?;
        scoped("ranges", self.ranges.validate())?;
        scoped("flow", self.flow.validate())?;
        scoped("restore", self.restore.validate())?;
        check(self.optim.lr > 0.0 && self.optim.lr.is_finite(), "optim.lr", format!("must be positive, got {}", self.optim.lr))?;
        check(self.optim.weight_decay >= 0.0, "optim.weight_decay", "must be non-negative")?;
        let m = &self.model;
        check(m.unet_widths.iter().all(|&w| w > 0), "model.unet_widths", "widths must be positive")?;
        check(m.expand >= 1, "model.expand", "must be at least 1")?;
        check(m.rrdb_width > 0 && m.rrdb_growth > 0, "model.rrdb_width", "RRDB sizes must be positive")?;
        check((0.0..1.0).contains(&m.ema_decay), "model.ema_decay", format!("must lie in [0, 1), got {}", m.ema_decay))?;
        let a = &self.autoencoder;
        check(a.hidden > 0 && a.latent_ch > 0, "autoencoder.hidden", "autoencoder sizes must be positive")?;
        check(a.batch >= 1, "autoencoder.batch", "must be at least 1")?;
        Ok(())
    }

    /// Run directory: `output_dir`, placed under `root` when relative.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            root.join(&self.output_dir)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("cannot serialize config: {e}")))
    }

    /// Non-fatal remarks, such as `M ≠ K`.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = self.flow.warnings();
        if self.restore.m != self.flow.k && self.model.objective == Objective::Lcfm {
            w.push(format!("restore.M = {} differs from flow.K = {}", self.restore.m, self.flow.k));
        }
        w
    }
}

fn eval_limit() -> usize {
    crate::eval::ot::MAX_MATCHING
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a config. Syntax and type errors carry a line
/// number; unknown keys are listed together.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let to_parse = |e: toml::de::Error| Error::Parse { line: e.span().map_or(0, |s| line_of(text, s.start)), message: e.message().trim().to_string() };
    let de = toml::Deserializer::parse(text).map_err(to_parse)?;
    let mut unknown = Vec::new();
    let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string())).map_err(to_parse)?;
    if !unknown.is_empty() {
        return Err(Error::config(unknown.join(", "), format!("unknown key{}", if unknown.len() > 1 { "s" } else { "" })));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}
