use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latent_restore::degrade::ParamRanges;
use latent_restore::eval::bound::{verify_bound, BoundConfig, BoundReport};
use latent_restore::eval::{evaluate_images, MetricsReport};
use latent_restore::experiment::dataset::redegrade;
use latent_restore::experiment::run::{autoencoder_stage, build_datasets};
use latent_restore::experiment::sweep::{mean_by_setting, Sweep};
use latent_restore::experiment::toy::{toy_bound, ToyConfig};
use latent_restore::experiment::{output_root, parse_config, run_experiment, synth_dataset, Ablation, AblationRow, DatasetContainer, ExperimentConfig, OUTPUT_ROOT_VAR};
use latent_restore::image::{decode_pnm, encode_pnm, to_batch, Image};
use latent_restore::latent::AutoEncoder;
use latent_restore::lcfm::{FlowModel, ParamField};
use latent_restore::numerics::{Checkpoint, Tensor};
use latent_restore::restore::{initial_point, restore, RestoreConfig};
use latent_restore::{Error, Result};

#[derive(Parser)]
#[command(name = "latent-restore", about = "Latent consistency flow matching for desk-scale image restoration", after_help = "Run outputs go under $LATENT_RESTORE_OUT (default ./runs).")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a procedural HQ/LQ dataset container.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train", value_parser = ["train", "val"])]
        split: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Re-draw the LQ side of a container under new degradation ranges.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// TOML file of `ParamRanges`; the desk ranges when absent.
        #[arg(long)]
        ranges: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train only the autoencoder and write `autoencoder.ckpt` to the run directory.
    TrainAe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full run: autoencoder, coarse estimator and field, validation restoration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Restore every PNM image in a directory.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `autoencoder.ckpt` next to the flow checkpoint.
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a run directory's validation set, or PNM directories against references.
    Evaluate {
        #[arg(long, conflicts_with_all = ["restored_dir", "reference_dir"])]
        run_dir: Option<PathBuf>,
        #[arg(long, requires = "reference_dir")]
        restored_dir: Option<PathBuf>,
        #[arg(long)]
        reference_dir: Option<PathBuf>,
        /// Also estimate both sides of the W2 bound (run directories only).
        #[arg(long, requires = "run_dir")]
        bound: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ablation sweep over seeds `seed, seed+1, ...`.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "all")]
        which: String,
    },
    /// Bound check on the two-dimensional toy task over seeds `seed, seed+1, ...`.
    VerifyBound {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1500)]
        train_steps: usize,
    },
}

fn load_config(path: &Option<PathBuf>, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = seed;
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn read_pnm_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::config("input-dir", format!("no .pgm/.ppm images in {}", dir.display())));
    }
    names.into_iter().map(|p| Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), decode_pnm(&fs::read(&p)?)?))).collect()
}

fn load_ae(path: &Path) -> Result<(AutoEncoder, f64)> {
    AutoEncoder::from_checkpoint(&Checkpoint::load(path)?)
}

fn print_metrics(rows: &[(&str, MetricsReport)]) {
    println!("method,{}", MetricsReport::CSV_HEADER);
    for (name, m) in rows {
        println!("{name},{}", m.csv_row());
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { config, seed, split, output } => {
            let mut cfg = load_config(&config, seed)?;
            cfg.dataset.seed = seed;
            let (spec, s) = if split == "train" { (cfg.dataset.train_spec(), seed) } else { (cfg.dataset.val_spec(), cfg.dataset.val_seed()) };
            let data = synth_dataset(&spec, &cfg.ranges, s)?;
            data.save(&output)?;
            println!("{} pairs, sha256 {}", data.len(), data.hash_hex());
        }
        Cmd::Degrade { input, output, ranges, seed } => {
            let ranges = match ranges {
                Some(p) => toml::from_str::<ParamRanges>(&fs::read_to_string(&p)?).map_err(|e| Error::config("ranges", e.message().to_string()))?,
                None => ParamRanges::desk(),
            };
            ranges.validate().map_err(|e| Error::config("ranges", e.to_string()))?;
            let data = redegrade(&DatasetContainer::load(&input)?, &ranges, seed)?;
            data.save(&output)?;
            println!("{} pairs, sha256 {}", data.len(), data.hash_hex());
        }
        Cmd::TrainAe { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = cfg.run_dir(&output_root());
            fs::create_dir_all(&dir)?;
            let (train, val) = build_datasets(&cfg)?;
            let path = dir.join("autoencoder.ckpt");
            let (ae, delta) = autoencoder_stage(&cfg, &train, &val.hq(), &path)?;
            ae.to_checkpoint(delta)?.save(&path)?;
            println!("delta_ed {delta}\n{}", path.display());
        }
        Cmd::Train { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let out = run_experiment(&cfg)?;
            print_metrics(&[("lq", out.degraded), ("restored", out.restored)]);
            eprintln!("run directory {}", out.dir.display());
        }
        Cmd::Restore { checkpoint, autoencoder, input_dir, output_dir, steps, seed } => {
            let model = FlowModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let ae_path = autoencoder.unwrap_or_else(|| checkpoint.with_file_name("autoencoder.ckpt"));
            let (ae, _) = load_ae(&ae_path)?;
            let cfg = RestoreConfig { m: steps, seed, ..RestoreConfig::default() };
            cfg.validate()?;
            if steps != model.flow.k {
                eprintln!("warning: --steps {steps} differs from the trained K = {}", model.flow.k);
            }
            let inputs = read_pnm_dir(&input_dir)?;
            let images: Vec<Image> = inputs.iter().map(|(_, i)| i.clone()).collect();
            let out = restore(&images, &ae, &model, &cfg)?;
            fs::create_dir_all(&output_dir)?;
            for ((name, _), img) in inputs.iter().zip(&out) {
                fs::write(output_dir.join(name), encode_pnm(img)?)?;
            }
            println!("restored {} images into {}", out.len(), output_dir.display());
        }
        Cmd::Evaluate { run_dir, restored_dir, reference_dir, bound, seed } => match (run_dir, restored_dir, reference_dir) {
            (Some(dir), _, _) => {
                let cfg = latent_restore::experiment::parse_config(dir.join("config.toml"))?;
                let (ae, _) = load_ae(&dir.join("autoencoder.ckpt"))?;
                let model = FlowModel::from_checkpoint(&Checkpoint::load(dir.join("flow.ckpt"))?)?;
                let (_, val) = build_datasets(&cfg)?;
                let (hq, lq) = (val.hq(), val.lq());
                let rcfg = RestoreConfig { seed, ..cfg.restore };
                let out = restore(&lq, &ae, &model, &rcfg)?;
                print_metrics(&[("lq", evaluate_images(&lq, &hq)?), ("restored", evaluate_images(&out, &hq)?)]);
                if bound {
                    let z0 = initial_point(&to_batch(&lq)?, &ae, &model, &rcfg)?;
                    let field = ParamField { arch: &model.field_arch, params: &model.theta_ema };
                    let x: Tensor<f32> = to_batch(&hq)?;
                    let bcfg = BoundConfig { sigma_min: model.flow.sigma_min, seed, ..BoundConfig::default() };
                    let r = verify_bound(&ae, &field, &x, &z0, &bcfg)?;
                    println!("{}\n{}", BoundReport::CSV_HEADER, r.csv_row());
                }
            }
            (None, Some(restored), Some(reference)) => {
                let a: Vec<Image> = read_pnm_dir(&restored)?.into_iter().map(|p| p.1).collect();
                let b: Vec<Image> = read_pnm_dir(&reference)?.into_iter().map(|p| p.1).collect();
                print_metrics(&[("restored", evaluate_images(&a, &b)?)]);
            }
            _ => return Err(Error::config("evaluate", "pass --run-dir, or --restored-dir with --reference-dir")),
        },
        Cmd::Ablate { config, seed, seeds, which } => {
            let cfg = load_config(&config, seed)?;
            let list: Vec<Ablation> = if which == "all" {
                Ablation::ALL.to_vec()
            } else {
                which.split(',').map(|s| Ablation::from_id(s.trim()).ok_or_else(|| Error::config("which", format!("unknown ablation `{s}`")))).collect::<Result<_>>()?
            };
            let seed_list: Vec<u64> = (seed..seed + seeds).collect();
            let mut sweep = Sweep::new(output_root(), cfg);
            println!("{}", AblationRow::CSV_HEADER);
            for a in list {
                let rows = sweep.ablate(a, &seed_list)?;
                for r in &rows {
                    println!("{}", r.csv_row());
                }
                for (s, p, f, w) in mean_by_setting(&rows) {
                    eprintln!("{a} {s}: mean psnr_median {p:.3}, frechet {f:.5}, w2 {w:.4}");
                }
            }
        }
        Cmd::VerifyBound { seed, seeds, train_steps } => {
            let cfg = ToyConfig { train_steps, ..ToyConfig::default() };
            println!("seed,{}", BoundReport::CSV_HEADER);
            let mut held = 0;
            for s in seed..seed + seeds {
                let r = toy_bound(&cfg, s)?;
                held += r.holds() as u64;
                println!("{s},{}", r.csv_row());
            }
            eprintln!("empirical bound held on {held} of {seeds} seeds (Lipschitz constants are sampled lower estimates)");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Io(_)) {
                eprintln!("(output root is ${OUTPUT_ROOT_VAR})");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
