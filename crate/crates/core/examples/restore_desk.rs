// The full desk pipeline: synthesize HQ/LQ pairs, train the autoencoder,
// train the coarse estimator and the consistency field jointly, then restore
// the held-out LQ images with a few Euler steps.
//
// ```text
// cargo run --release --example restore_desk            # small, about a minute
// cargo run --release --example restore_desk -- --full  # the default config
// ```
//
// Outputs go to `$LATENT_RESTORE_OUT/examples/restore-desk`.

use std::path::PathBuf;

use latent_restore::eval::median;
use latent_restore::experiment::{output_root, run_experiment_with, ExperimentConfig};
use latent_restore::restore::RestoreConfig;
use latent_restore::Result;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.epochs = 4;
    c.dataset.train = 512;
    c.dataset.val = 64;
    c.autoencoder.epochs = 8;
    c
}

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
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

fn run(mut cfg: ExperimentConfig, root: PathBuf) -> Result<()> {
    cfg.output_dir = PathBuf::from("examples/restore-desk");
    let out = run_experiment_with(&cfg, &root, None, &mut |row| println!("{}", row.csv_row()))?;
    println!("run directory {}", out.dir.display());
    println!("autoencoder held-out error {:.5}", out.delta_ed);
    println!("median PSNR: LQ {:.2} dB, restored {:.2} dB", median(&out.degraded_psnr), median(&out.restored_psnr));
    for m in [1, 2, 3, 6] {
        let r = out.evaluate_with(&RestoreConfig { m, ..cfg.restore })?;
        println!("M = {m}: psnr median {:.2}, ssim {:.3}, frechet {:.4}", r.psnr_median, r.ssim, r.frechet);
    }
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(tiny(), std::env::temp_dir().join("latent-restore-examples"))
}

fn main() -> Result<()> {
    let cfg = if std::env::args().any(|a| a == "--full") { ExperimentConfig::default() } else { small() };
    run(cfg, output_root())
}
