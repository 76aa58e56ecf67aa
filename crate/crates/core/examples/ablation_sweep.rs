// Sweeps the weight β of the decoded MSE term and prints the seed-averaged
// PSNR and Fréchet score of each setting. Runs sharing a seed reuse one
// trained autoencoder.
//
// ```text
// cargo run --release --example ablation_sweep                 # small, one seed
// cargo run --release --example ablation_sweep -- --full       # default config, seeds 0..3
// ```

use std::path::PathBuf;

use latent_restore::experiment::sweep::mean_by_setting;
use latent_restore::experiment::{output_root, Ablation, ExperimentConfig, Sweep};
use latent_restore::Result;

fn run(base: ExperimentConfig, root: PathBuf, seeds: &[u64]) -> Result<()> {
    let base = ExperimentConfig { output_dir: PathBuf::from("examples/ablation-beta"), ..base };
    let mut sweep = Sweep::new(root, base);
    let rows = sweep.ablate(Ablation::Beta, seeds)?;
    for r in &rows {
        println!("{}", r.csv_row());
    }
    for (setting, psnr, frechet, w2) in mean_by_setting(&rows) {
        println!("{setting:<12} psnr median {psnr:.2}  frechet {frechet:.4}  w2 {w2:.4}");
    }
    Ok(())
}

pub fn run_example() -> Result<()> {
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
    run(c, std::env::temp_dir().join("latent-restore-examples"), &[0])
}

fn main() -> Result<()> {
    if std::env::args().any(|a| a == "--full") {
        run(ExperimentConfig::default(), output_root(), &[0, 1, 2])
    } else {
        let mut c = ExperimentConfig::default();
        c.epochs = 3;
        c.dataset.train = 256;
        c.dataset.val = 64;
        c.autoencoder.epochs = 6;
        run(c, output_root(), &[0])
    }
}
