// A two-dimensional restoration toy with an identity autoencoder: train a
// velocity field from noisy observations to clean points, then compare the
// restored distribution's W₂ distance with the error bound assembled from
// the field's regression error and estimated Lipschitz constants.
//
// ```text
// cargo run --release --example lcfm_toy_2d
// ```

use latent_restore::eval::BoundReport;
use latent_restore::experiment::toy::{toy_bound, ToyConfig};
use latent_restore::Result;

fn run(cfg: &ToyConfig, seeds: u64) -> Result<()> {
    println!("seed,{}", BoundReport::CSV_HEADER);
    for seed in 0..seeds {
        println!("{seed},{}", toy_bound(cfg, seed)?.csv_row());
    }
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(&ToyConfig { train_steps: 50, test_pairs: 200, ..ToyConfig::default() }, 1)
}

fn main() -> Result<()> {
    run(&ToyConfig::default(), 3)
}
