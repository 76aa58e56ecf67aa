//! Ablation sweeps over a base config. Runs that differ only in their output
//! directory are trained once, and every run with the same seed, dataset and
//! autoencoder settings shares one trained autoencoder.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::dataset::hex;
use super::run::{autoencoder_stage, build_datasets, run_experiment_with, RunOutcome};
use super::ExperimentConfig;
use crate::error::Result;
use crate::eval::MetricsReport;
use crate::latent::AutoEncoder;
use crate::lcfm::{Objective, Source};
use crate::restore::{RestoreConfig, LATENT_FM_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// `β ∈ {0, 0.001, 0.01}`.
    Beta,
    /// Training noise `σ_s ∈ {0, 0.1, 0.2}`.
    SigmaS,
    /// Flow matching at 1, 3, 10 and 25 Euler steps against the consistency model at `M = K`.
    Nfe,
    /// Coarse estimator against starting from `E(y)`.
    Coarse,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Beta, Ablation::SigmaS, Ablation::Nfe, Ablation::Coarse];

    pub fn id(self) -> &'static str {
        match self {
            Ablation::Beta => "beta",
            Ablation::SigmaS => "sigma-s",
            Ablation::Nfe => "nfe",
            Ablation::Coarse => "coarse",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.id() == s)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub setting: String,
    pub seed: u64,
    pub psnr_median: f64,
    pub frechet: f64,
    pub w2: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "ablation,setting,seed,psnr_median,frechet,w2_empirical";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.ablation, self.setting, self.seed, self.psnr_median, self.frechet, self.w2)
    }
}

/// Mean PSNR median, Fréchet and W₂ over seeds for each setting, in first-seen order.
pub fn mean_by_setting(rows: &[AblationRow]) -> Vec<(String, f64, f64, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.setting) {
            order.push(r.setting.clone());
        }
    }
    order
        .into_iter()
        .map(|s| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.setting == s).collect();
            let n = sel.len() as f64;
            let m = |f: fn(&AblationRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            (s, m(|r| r.psnr_median), m(|r| r.frechet), m(|r| r.w2))
        })
        .collect()
}

pub struct Sweep {
    pub root: PathBuf,
    pub base: ExperimentConfig,
    aes: HashMap<String, (AutoEncoder, f64)>,
    runs: HashMap<String, RunOutcome>,
}

fn short_hash(s: &str) -> String {
    hex(&Sha256::digest(s.as_bytes()))[..12].to_string()
}

impl Sweep {
    pub fn new(root: impl Into<PathBuf>, base: ExperimentConfig) -> Self {
        Self { root: root.into(), base, aes: HashMap::new(), runs: HashMap::new() }
    }

    /// The base config with `seed` set and `edit` applied.
    pub fn variant(&self, seed: u64, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.seed = seed;
        edit(&mut c);
        c
    }

    /// Trains `cfg` unless an identical run is cached. The run directory is
    /// `<base output_dir>/<label>-<config hash>` under the sweep root.
    pub fn run(&mut self, label: &str, cfg: &ExperimentConfig) -> Result<&RunOutcome> {
        let mut keyed = cfg.clone();
        keyed.output_dir = PathBuf::new();
        let key = keyed.to_toml()?;
        if !self.runs.contains_key(&key) {
            let mut c = cfg.clone();
            c.output_dir = self.base.output_dir.join(format!("{label}-{}", short_hash(&key)));
            let ae_key = format!("{}\n{}\n{:?}\n{:?}", c.seed, toml::to_string(&c.dataset).unwrap_or_default(), c.autoencoder, c.autoencoder_checkpoint);
            if !self.aes.contains_key(&ae_key) {
                let dir = c.run_dir(&self.root);
                fs::create_dir_all(&dir)?;
                let (train, val) = build_datasets(&c)?;
                let pair = autoencoder_stage(&c, &train, &val.hq(), &dir.join("autoencoder.ckpt"))?;
                self.aes.insert(ae_key.clone(), pair);
            }
            let out = run_experiment_with(&c, &self.root, self.aes.get(&ae_key).cloned(), &mut |_| {})?;
            self.runs.insert(key.clone(), out);
        }
        Ok(&self.runs[&key])
    }

    fn row(ablation: Ablation, setting: impl Into<String>, seed: u64, m: &MetricsReport) -> AblationRow {
        AblationRow { ablation, setting: setting.into(), seed, psnr_median: m.psnr_median, frechet: m.frechet, w2: m.w2_empirical }
    }

    /// One row per setting and seed for `ablation`; also written to
    /// `<root>/<output_dir>/ablation-<id>.csv`.
    pub fn ablate(&mut self, ablation: Ablation, seeds: &[u64]) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &seed in seeds {
            match ablation {
                Ablation::Beta => {
                    for beta in [0.0, 0.001, 0.01] {
                        let c = self.variant(seed, |c| c.flow.beta = beta);
                        let out = self.run(&format!("seed{seed}-beta{beta}"), &c)?;
                        rows.push(Self::row(ablation, format!("beta={beta}"), seed, &out.restored));
                    }
                }
                Ablation::SigmaS => {
                    for s in [0.0, 0.1, 0.2] {
                        let c = self.variant(seed, |c| {
                            c.flow.sigma_s = s;
                            c.restore.sigma_s = None;
                        });
                        let out = self.run(&format!("seed{seed}-sigma{s}"), &c)?;
                        rows.push(Self::row(ablation, format!("sigma_s={s}"), seed, &out.restored));
                    }
                }
                Ablation::Nfe => {
                    let c = self.variant(seed, |c| c.model.objective = Objective::FlowMatching);
                    let fm = self.run(&format!("seed{seed}-fm"), &c)?;
                    for m in [1, 3, 10, LATENT_FM_STEPS] {
                        let rc = RestoreConfig { m, ..fm.config.restore };
                        rows.push(Self::row(ablation, format!("fm/M={m}"), seed, &fm.evaluate_with(&rc)?));
                    }
                    let c = self.variant(seed, |_| {});
                    let lc = self.run(&format!("seed{seed}-main"), &c)?;
                    let rc = RestoreConfig { m: lc.config.flow.k, ..lc.config.restore };
                    rows.push(Self::row(ablation, format!("lcfm/M={}", rc.m), seed, &lc.evaluate_with(&rc)?));
                }
                Ablation::Coarse => {
                    let c = self.variant(seed, |_| {});
                    let with = self.run(&format!("seed{seed}-main"), &c)?;
                    rows.push(Self::row(ablation, "coarse", seed, &with.restored));
                    let c = self.variant(seed, |c| c.model.source = Source::FrozenEncoder);
                    let without = self.run(&format!("seed{seed}-nocoarse"), &c)?;
                    rows.push(Self::row(ablation, "no-coarse", seed, &without.restored));
                }
            }
        }
        let dir = self.base.run_dir(&self.root);
        fs::create_dir_all(&dir)?;
        let body: String = rows.iter().map(|r| r.csv_row() + "\n").collect();
        fs::write(dir.join(format!("ablation-{}.csv", ablation.id())), format!("{}\n{body}", AblationRow::CSV_HEADER))?;
        Ok(rows)
    }
}

/// [`Sweep::ablate`] on a fresh sweep.
pub fn ablate(base: &ExperimentConfig, root: impl Into<PathBuf>, ablation: Ablation, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    Sweep::new(root, base.clone()).ablate(ablation, seeds)
}
