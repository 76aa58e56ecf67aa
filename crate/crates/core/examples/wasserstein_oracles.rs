// Exact discrete W₂ by optimal assignment, checked against closed forms, and
// the Gaussian Fréchet score used as a distribution-level quality measure.
//
// ```text
// cargo run --example wasserstein_oracles
// ```

use latent_restore::eval::{frechet, hungarian, moments, w2_empirical, w2_gaussian, Points};
use latent_restore::{rng, Result};

fn gaussian(n: usize, dim: usize, mean: f64, std: f64, seed: u64) -> Result<Points> {
    let mut r = rng::stream(seed, "example/gauss");
    Points::new(n, dim, (0..n * dim).map(|_| mean + std * rng::normal(&mut r)).collect())
}

pub fn run_example() -> Result<()> {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let assign = hungarian(&cost, 3)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
    println!("assignment {assign:?}, cost {total}");
    assert_eq!(total, 5.0);

    // Between N(0, 1) and N(m, s²) in one dimension, W₂² = m² + (1 − s)².
    for (m, s) in [(2.0, 1.0), (0.0, 2.0), (1.0, 0.5)] {
        let a = gaussian(1000, 1, 0.0, 1.0, 1)?;
        let b = gaussian(1000, 1, m, s, 2)?;
        let exact = (m * m + (1.0 - s) * (1.0 - s)).sqrt();
        let (ma, sa) = moments(&a)?;
        let (mb, sb) = moments(&b)?;
        println!(
            "N({m}, {s}²): empirical {:.4}, moment-matched {:.4}, closed form {exact:.4}, frechet {:.4}",
            w2_empirical(&a, &b)?,
            w2_gaussian(&ma, &sa, &mb, &sb)?,
            frechet(&a, &b)?
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
