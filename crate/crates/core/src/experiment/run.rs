//! One end-to-end run: synthesize, train or load the autoencoder, train the
//! coarse estimator and field jointly, restore the validation set with EMA
//! weights, and write every artifact into the run directory.
//!
//! A finished run directory holds `config.toml`, `dataset.sha256`,
//! `autoencoder.ckpt`, `flow.ckpt` (live and EMA weights), `metrics.csv`,
//! `final.csv`, `curve.svg` and `manifest.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::dataset::{hex, synth_dataset, DatasetContainer};
use super::plot::line_chart;
use super::{output_root, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_images, psnr_each, w2_empirical, MetricsReport, Points};
use crate::image::{to_batch, Image};
use crate::latent::{train_autoencoder, AutoEncoder};
use crate::lcfm::{FlowModel, LossReport, TrainConfig, Trainer};
use crate::numerics::{Checkpoint, Tensor};
use crate::restore::{restore, RestoreConfig};
use crate::rng;

pub const METRICS_HEADER: &str = "epoch,L2,L_LCFM,L_MSE,L_DP,val_psnr,val_w2";
pub const FINAL_HEADER: &str = "method,mse,psnr,psnr_median,ssim,w2_empirical,frechet,n_restored,n_reference";
pub const REQUIRED: [&str; 5] = ["config.toml", "dataset.sha256", "autoencoder.ckpt", "flow.ckpt", "metrics.csv"];

/// Epoch 0 is the evaluation of the initial weights and has no losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub losses: Option<LossReport>,
    pub val_psnr: f64,
    pub val_w2: f64,
}

impl EpochRow {
    pub fn csv_row(&self) -> String {
        let l = match self.losses {
            Some(l) => format!("{},{},{},{}", l.l2, l.lcfm, l.mse, l.dp),
            None => ",,,".into(),
        };
        format!("{},{l},{},{}", self.epoch, self.val_psnr, self.val_w2)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub ae: AutoEncoder,
    pub delta_ed: f64,
    pub model: FlowModel,
    pub rows: Vec<EpochRow>,
    pub val_hq: Vec<Image>,
    pub val_lq: Vec<Image>,
    /// EMA restoration of the validation set under `config.restore`.
    pub restored: MetricsReport,
    /// The LQ inputs scored against HQ.
    pub degraded: MetricsReport,
    pub restored_psnr: Vec<f64>,
    pub degraded_psnr: Vec<f64>,
}

impl RunOutcome {
    pub fn restore_val(&self, cfg: &RestoreConfig) -> Result<Vec<Image>> {
        restore(&self.val_lq, &self.ae, &self.model, cfg)
    }

    /// Restores the validation set with `cfg` and scores it.
    pub fn evaluate_with(&self, cfg: &RestoreConfig) -> Result<MetricsReport> {
        evaluate_images(&self.restore_val(cfg)?, &self.val_hq)
    }
}

/// [`run_experiment_with`] under [`output_root`], training a fresh autoencoder.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(cfg, &output_root(), None, &mut |_| {})
}

/// Runs `cfg` into `cfg.run_dir(root)`. A supplied autoencoder (with its Δ̂)
/// replaces both training and `autoencoder_checkpoint`.
pub fn run_experiment_with(cfg: &ExperimentConfig, root: &Path, ae: Option<(AutoEncoder, f64)>, on_epoch: &mut dyn FnMut(&EpochRow)) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir(root);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let (train, val) = build_datasets(cfg).map_err(|e| e.in_stage("synth"))?;
    fs::write(dir.join("dataset.sha256"), format!("train {}\nval {}\n", train.hash_hex(), val.hash_hex()))?;
    let val_hq = val.hq();
    let val_lq = val.lq();

    let ae_path = dir.join("autoencoder.ckpt");
    let (ae, delta_ed) = match ae {
        Some(pair) => pair,
        None => autoencoder_stage(cfg, &train, &val_hq, &ae_path).map_err(|e| e.in_stage("autoencoder"))?,
    };
    ae.to_checkpoint(delta_ed)?.save(&ae_path)?;

    let flow_path = dir.join("flow.ckpt");
    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let model = train_stage(cfg, &ae, &train, &val_hq, &val_lq, &dir, &mut rows, on_epoch)
        .map_err(|e| e.in_stage(format!("train (last good checkpoint: {})", flow_path.display())))?;

    let (restored, degraded, restored_psnr, degraded_psnr) = (|| -> Result<_> {
        let out = restore(&val_lq, &ae, &model, &cfg.restore)?;
        Ok((evaluate_images(&out, &val_hq)?, evaluate_images(&val_lq, &val_hq)?, psnr_each(&out, &val_hq)?, psnr_each(&val_lq, &val_hq)?))
    })()
    .map_err(|e| e.in_stage("evaluate"))?;
    fs::write(dir.join("final.csv"), format!("{FINAL_HEADER}\nlq,{}\nrestored,{}\n", degraded.csv_row(), restored.csv_row()))?;
    fs::write(dir.join("curve.svg"), curve(&rows))?;
    write_manifest(&dir).map_err(|e| e.in_stage("manifest"))?;

    Ok(RunOutcome { dir, config: cfg.clone(), ae, delta_ed, model, rows, val_hq, val_lq, restored, degraded, restored_psnr, degraded_psnr })
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(DatasetContainer, DatasetContainer)> {
    let d = &cfg.dataset;
    Ok((synth_dataset(&d.train_spec(), &cfg.ranges, d.seed)?, synth_dataset(&d.val_spec(), &cfg.ranges, d.val_seed())?))
}

/// Loads `autoencoder_checkpoint` when set, else trains on the HQ training images.
pub fn autoencoder_stage(cfg: &ExperimentConfig, train: &DatasetContainer, val_hq: &[Image], last_good: &Path) -> Result<(AutoEncoder, f64)> {
    if let Some(path) = &cfg.autoencoder_checkpoint {
        let (ae, delta) = AutoEncoder::from_checkpoint(&Checkpoint::load(path)?)?;
        let d = &cfg.dataset;
        if ae.image_dims != (d.size, d.size, d.channels) {
            return Err(Error::config("autoencoder_checkpoint", format!("autoencoder expects {:?} images, dataset has {:?}", ae.image_dims, (d.size, d.size, d.channels))));
        }
        return Ok((ae, delta));
    }
    let d = &cfg.dataset;
    let mut r = rng::stream(cfg.seed, "run/ae-init");
    let ae = AutoEncoder::conv((d.size, d.size, d.channels), cfg.autoencoder.hidden, cfg.autoencoder.latent_ch, &mut r)?;
    let trained = train_autoencoder(ae, &train.hq(), val_hq, &cfg.autoencoder, rng::derive(cfg.seed, "run/ae-train"), Some(last_good))?;
    Ok((trained.ae, trained.delta_hat))
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let row = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, idx.iter().flat_map(|&i| t.data()[i * row..(i + 1) * row].iter().copied()).collect())
}

fn validation(model: &FlowModel, ae: &AutoEncoder, val_hq: &[Image], val_lq: &[Image], cfg: &RestoreConfig) -> Result<(f64, f64)> {
    let out = restore(val_lq, ae, model, cfg)?;
    let p = psnr_each(&out, val_hq)?;
    let w2 = w2_empirical(&Points::from_images(&out)?, &Points::from_images(val_hq)?)?;
    Ok((p.iter().sum::<f64>() / p.len() as f64, w2))
}

#[allow(clippy::too_many_arguments)]
fn train_stage(
    cfg: &ExperimentConfig,
    ae: &AutoEncoder,
    train: &DatasetContainer,
    val_hq: &[Image],
    val_lq: &[Image],
    dir: &Path,
    rows: &mut Vec<EpochRow>,
    on_epoch: &mut dyn FnMut(&EpochRow),
) -> Result<FlowModel> {
    let latent_ch = ae.latent_shape.0;
    let m = &cfg.model;
    let model = FlowModel::new(ae, m.source, m.coarse_arch(latent_ch), m.field_arch(latent_ch), cfg.flow, rng::derive(cfg.seed, "run/model"));
    let tcfg = TrainConfig { flow: cfg.flow, objective: m.objective, source: m.source, optim: cfg.optim, ema_decay: m.ema_decay };
    let mut trainer = Trainer::new(tcfg, model, rng::derive(cfg.seed, "run/trainer"))?;
    let x_all = to_batch(&train.hq())?;
    let y_all = to_batch(&train.lq())?;
    let mut shuffle = rng::stream(cfg.seed, "run/batches");
    let flow_path = dir.join("flow.ckpt");
    let csv_path = dir.join("metrics.csv");

    let mut record = |row: EpochRow, model: &FlowModel, steps: u64, rows: &mut Vec<EpochRow>| -> Result<()> {
        rows.push(row);
        on_epoch(&row);
        let body: String = rows.iter().map(|r| r.csv_row() + "\n").collect();
        fs::write(&csv_path, format!("{METRICS_HEADER}\n{body}"))?;
        model.to_checkpoint(steps)?.save(&flow_path)
    };

    let (p0, w0) = validation(&trainer.model, ae, val_hq, val_lq, &cfg.restore)?;
    record(EpochRow { epoch: 0, losses: None, val_psnr: p0, val_w2: w0 }, &trainer.model, 0, rows)?;
    for epoch in 1..=cfg.epochs {
        let batches = rng::shuffled_batches(&mut shuffle, x_all.shape()[0], cfg.batch);
        let mut sum = LossReport::default();
        let mut count = 0.0;
        for idx in &batches {
            let r = trainer.step(ae, &gather(&x_all, idx)?, &gather(&y_all, idx)?)?;
            let w = idx.len() as f64;
            sum.l2 += w * r.l2;
            sum.lcfm += w * r.lcfm;
            sum.mse += w * r.mse;
            sum.dp += w * r.dp;
            sum.total += w * r.total;
            count += w;
        }
        let mean = LossReport { l2: sum.l2 / count, lcfm: sum.lcfm / count, mse: sum.mse / count, dp: sum.dp / count, total: sum.total / count };
        let (p, w2) = validation(&trainer.model, ae, val_hq, val_lq, &cfg.restore)?;
        record(EpochRow { epoch, losses: Some(mean), val_psnr: p, val_w2: w2 }, &trainer.model, trainer.steps(), rows)?;
    }
    Ok(trainer.model)
}

fn curve(rows: &[EpochRow]) -> String {
    let pick = |f: &dyn Fn(&EpochRow) -> Option<f64>| rows.iter().map(|r| (r.epoch as f64, f(r).unwrap_or(f64::NAN))).collect::<Vec<_>>();
    line_chart(
        "learning curves (each series scaled to its own range)",
        &[
            ("L2", pick(&|r| r.losses.map(|l| l.l2))),
            ("L_LCFM", pick(&|r| r.losses.map(|l| l.lcfm))),
            ("L_MSE", pick(&|r| r.losses.map(|l| l.mse))),
            ("val PSNR", pick(&|r| Some(r.val_psnr))),
            ("val W2", pick(&|r| Some(r.val_w2))),
        ],
    )
}

/// Writes `manifest.txt` (name and SHA-256 per artifact) after checking that
/// every required artifact exists and is non-empty.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut lines = String::new();
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.txt")
        .collect();
    names.sort();
    for req in REQUIRED {
        let ok = fs::metadata(dir.join(req)).map(|m| m.len() > 0).unwrap_or(false);
        if !ok {
            return Err(Error::Format(format!("run directory {} lacks `{req}`", dir.display())));
        }
    }
    for n in names {
        lines.push_str(&format!("{} {n}\n", hex(&Sha256::digest(fs::read(dir.join(&n))?))));
    }
    fs::write(dir.join("manifest.txt"), lines)?;
    Ok(())
}

/// Re-checks a manifest against the files on disk.
pub fn check_manifest(dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    for req in REQUIRED {
        if !text.lines().any(|l| l.split_once(' ').map(|(_, n)| n) == Some(req)) {
            return Err(Error::Format(format!("manifest does not list `{req}`")));
        }
    }
    for line in text.lines() {
        let (hash, name) = line.split_once(' ').ok_or_else(|| Error::Format(format!("bad manifest line `{line}`")))?;
        if hex(&Sha256::digest(fs::read(dir.join(name))?)) != hash {
            return Err(Error::Format(format!("`{name}` does not match its manifest hash")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.output_dir = dir.to_path_buf();
        c.epochs = 1;
        c.batch = 16;
        c.dataset.train = 32;
        c.dataset.val = 8;
        c.autoencoder.epochs = 1;
        c.model.unet_widths = [4, 4, 4];
        c.model.rrdb_width = 4;
        c.model.rrdb_growth = 2;
        c.model.rrdb_blocks = 1;
        c
    }

    #[test]
    fn zero_epochs_still_reports() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = tiny(&tmp.path().join("run"));
        c.epochs = 0;
        let out = run_experiment_with(&c, tmp.path(), None, &mut |_| {}).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert!(out.rows[0].losses.is_none());
        check_manifest(&out.dir).unwrap();
        let csv = fs::read_to_string(out.dir.join("metrics.csv")).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
    }

    #[test]
    fn rerun_reproduces_metrics_and_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let a = run_experiment_with(&tiny(&tmp.path().join("a")), tmp.path(), None, &mut |_| {}).unwrap();
        let b = run_experiment_with(&tiny(&tmp.path().join("b")), tmp.path(), None, &mut |_| {}).unwrap();
        for f in ["metrics.csv", "final.csv", "flow.ckpt", "autoencoder.ckpt", "dataset.sha256"] {
            assert_eq!(fs::read(a.dir.join(f)).unwrap(), fs::read(b.dir.join(f)).unwrap(), "{f}");
        }
        let ck = Checkpoint::<f32>::load(a.dir.join("flow.ckpt")).unwrap();
        assert_eq!(FlowModel::from_checkpoint(&ck).unwrap(), a.model);
    }

    #[test]
    fn tampered_artifacts_fail_the_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = tiny(&tmp.path().join("run"));
        c.epochs = 0;
        let out = run_experiment_with(&c, tmp.path(), None, &mut |_| {}).unwrap();
        fs::write(out.dir.join("metrics.csv"), "edited").unwrap();
        assert!(check_manifest(&out.dir).is_err());
    }
}
