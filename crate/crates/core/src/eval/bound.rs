//! Empirical check of `W₂(p_x̂, p_x) ≤ √Δ_ED + C·√Δ_v` with
//! `C = L_D·e^{0.5 + L_v}`.
//!
//! Norms are Euclidean over whole samples, so `Δ_ED` and `Δ_v` are expected
//! squared norms (sums over elements, averaged over samples), and the left
//! side is the exact discrete W₂ between decoded restorations and references.
//! The true velocity is replaced by the straight-path velocity
//! `z1 − (1−σ_min)·z0` of each pair. Sampled Lipschitz ratios only bound the
//! constants from below, so a violation is reported, never asserted.

use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::latent::AutoEncoder;
use crate::lcfm::{eval_field, straight_velocity, trajectory_batch, Field};
use crate::numerics::Tensor;
use crate::restore::euler_solve;
use crate::rng;

use super::ot::{w2_empirical, Points};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzConfig {
    pub random_pairs: usize,
    pub nearby_pairs: usize,
    /// Per-coordinate standard deviation of the nearby-pair offset.
    pub perturbation: f64,
    pub chunk: usize,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self { random_pairs: 10_000, nearby_pairs: 1_000, perturbation: 1e-3, chunk: 256 }
    }
}

/// `‖f(a) − f(b)‖ / ‖a − b‖` for `random_pairs` pairs of distinct rows of
/// `points`, then `nearby_pairs` pairs `(p, p + δ)`. `eval` maps a pair of
/// equal-size batches to their images under `f`. Pair `k` depends only on
/// `seed` and `k`, so estimates over prefixes are nested.
pub fn lipschitz_ratios(
    points: &Tensor<f32>,
    cfg: &LipschitzConfig,
    seed: u64,
    mut eval: impl FnMut(&Tensor<f32>, &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)>,
) -> Result<Vec<f64>> {
    ensure!(points.rank() >= 1 && points.shape()[0] >= 2, "Lipschitz estimation needs at least two points");
    ensure!(cfg.chunk > 0, "Lipschitz chunk size must be positive");
    let n = points.shape()[0];
    let d = points.len() / n;
    let row_shape = &points.shape()[1..];
    let mut r = rng::stream(seed, "eval/lipschitz");
    let mut pairs: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(cfg.random_pairs + cfg.nearby_pairs);
    let row = |i: usize| points.data()[i * d..(i + 1) * d].to_vec();
    for _ in 0..cfg.random_pairs {
        let i = r.random_range(0..n);
        let j = (i + r.random_range(1..n)) % n;
        pairs.push((row(i), row(j)));
    }
    for _ in 0..cfg.nearby_pairs {
        let a = row(r.random_range(0..n));
        let off = rng::normals(&mut r, d, cfg.perturbation);
        let b = a.iter().zip(&off).map(|(&v, &o)| v + o as f32).collect();
        pairs.push((a, b));
    }
    let mut ratios = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(cfg.chunk) {
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(row_shape);
        let a = Tensor::new(&shape, chunk.iter().flat_map(|p| p.0.iter().copied()).collect())?;
        let b = Tensor::new(&shape, chunk.iter().flat_map(|p| p.1.iter().copied()).collect())?;
        let (fa, fb) = eval(&a, &b)?;
        ensure!(fa.shape() == fb.shape() && fa.shape()[0] == chunk.len(), "Lipschitz evaluation returned mismatched batches");
        let e = fa.len() / chunk.len();
        for k in 0..chunk.len() {
            let din = dist(&a.data()[k * d..(k + 1) * d], &b.data()[k * d..(k + 1) * d]);
            let dout = dist(&fa.data()[k * e..(k + 1) * e], &fb.data()[k * e..(k + 1) * e]);
            ratios.push(if din > 0.0 { dout / din } else { 0.0 });
        }
    }
    Ok(ratios)
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Largest of the first `count` ratios: a lower bound on the Lipschitz constant.
pub fn lipschitz_estimate(ratios: &[f64], count: usize) -> f64 {
    ratios[..count.min(ratios.len())].iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConfig {
    pub sigma_min: f64,
    /// Euler steps used to produce the restored samples on the left side.
    pub euler_steps: usize,
    /// Time draws per pair for the Monte-Carlo estimate of `Δ_v`.
    pub t_draws: usize,
    pub min_pairs: usize,
    pub lipschitz: LipschitzConfig,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self { sigma_min: 1e-5, euler_steps: 50, t_draws: 8, min_pairs: 200, lipschitz: LipschitzConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub delta_ed: f64,
    pub delta_v: f64,
    pub lip_decoder: f64,
    pub lip_field: f64,
    pub constant_c: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub n_pairs: usize,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "delta_ed,delta_v,lip_decoder,lip_field,constant_c,lhs,rhs,holds,n_pairs";

    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.delta_ed,
            self.delta_v,
            self.lip_decoder,
            self.lip_field,
            self.constant_c,
            self.lhs,
            self.rhs,
            self.holds(),
            self.n_pairs
        )
    }
}

fn row_sq_norms(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let n = a.shape()[0];
    let e = a.len() / n;
    (0..n)
        .map(|i| a.data()[i * e..(i + 1) * e].iter().zip(&b.data()[i * e..(i + 1) * e]).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Estimates both sides of the bound on held-out pairs: references `x`
/// (`N` samples) and the source latents `z0` the flow starts from.
pub fn verify_bound(ae: &AutoEncoder, field: &dyn Field<f32>, x: &Tensor<f32>, z0: &Tensor<f32>, cfg: &BoundConfig) -> Result<BoundReport> {
    let n = x.shape()[0];
    ensure!(n >= cfg.min_pairs, "bound verification needs at least {} pairs, got {n}", cfg.min_pairs);
    ensure!(z0.rank() >= 1 && z0.shape()[0] == n, "{} source latents for {n} references", z0.shape().first().copied().unwrap_or(0));
    ensure!(cfg.t_draws > 0, "need at least one time draw per pair");

    let z1 = ae.encode(x)?;
    ensure!(z1.shape() == z0.shape(), "source latents {:?} do not match encoded references {:?}", z0.shape(), z1.shape());
    let delta_ed = mean(&row_sq_norms(&ae.decode(&z1)?, x));

    let mut r = rng::stream(cfg.seed, "eval/bound-t");
    let v_star = straight_velocity(z0, &z1, cfg.sigma_min)?;
    let mut residuals = Vec::with_capacity(n * cfg.t_draws);
    let mut zt_points = None;
    for _ in 0..cfg.t_draws {
        let t: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let zt = trajectory_batch(z0, &z1, &t, cfg.sigma_min)?;
        let tf: Vec<f32> = t.iter().map(|&v| v as f32).collect();
        let v = eval_field(field, &zt, &tf)?;
        residuals.extend(row_sq_norms(&v, &v_star));
        zt_points.get_or_insert(zt);
    }
    let delta_v = mean(&residuals);

    let z_hat = euler_solve(z0, field, cfg.euler_steps)?;
    let x_hat = ae.decode(&z_hat)?;
    let lhs = w2_empirical(&Points::from_tensor(&x_hat)?, &Points::from_tensor(x)?)?;

    let dec_points = Tensor::concat_batch(&[z1.clone(), z_hat])?;
    let lip_decoder = lipschitz_estimate(
        &lipschitz_ratios(&dec_points, &cfg.lipschitz, rng::derive(cfg.seed, "decoder"), |a, b| Ok((ae.decode(a)?, ae.decode(b)?)))?,
        usize::MAX,
    );
    let mut rt = rng::stream(cfg.seed, "eval/bound-lip-t");
    let field_points = zt_points.expect("at least one draw");
    let lip_field = lipschitz_estimate(
        &lipschitz_ratios(&field_points, &cfg.lipschitz, rng::derive(cfg.seed, "field"), |a, b| {
            let t: Vec<f32> = (0..a.shape()[0]).map(|_| rt.random::<f32>()).collect();
            Ok((eval_field(field, a, &t)?, eval_field(field, b, &t)?))
        })?,
        usize::MAX,
    );

    let constant_c = lip_decoder * (0.5 + lip_field).exp();
    let rhs = delta_ed.sqrt() + constant_c * delta_v.sqrt();
    Ok(BoundReport { delta_ed, delta_v, lip_decoder, lip_field, constant_c, lhs, rhs, n_pairs: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcfm::{ConstantField, FnField};

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, "test/bound-data");
        Tensor::new(&[n, d, 1, 1], rng::normals(&mut r, n * d, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
    }

    fn small_lip() -> LipschitzConfig {
        LipschitzConfig { random_pairs: 500, nearby_pairs: 100, ..LipschitzConfig::default() }
    }

    #[test]
    fn ratios_of_a_linear_map() {
        let p = gaussian_rows(50, 3, 1);
        let ratios = lipschitz_ratios(&p, &small_lip(), 7, |a, b| Ok((a.scale(2.5), b.scale(2.5)))).unwrap();
        assert_eq!(ratios.len(), 600);
        assert!(ratios[..500].iter().all(|&q| (q - 2.5).abs() < 1e-5));
        // f32 rounding of a 1e-3 offset.
        assert!(ratios[500..].iter().all(|&q| (q - 2.5).abs() < 2e-3));
    }

    #[test]
    fn estimates_are_nested_maxima() {
        let p = gaussian_rows(40, 2, 2);
        let ratios = lipschitz_ratios(&p, &small_lip(), 3, |a, b| Ok((a.map(f32::sin), b.map(f32::sin)))).unwrap();
        let mut last = 0.0;
        for count in [1, 10, 100, 600] {
            let e = lipschitz_estimate(&ratios, count);
            assert!(e >= last);
            assert!(ratios[..count].iter().all(|&q| q <= e));
            last = e;
        }
        assert!(last <= 1.0 + 1e-5);
    }

    #[test]
    fn exact_translation_gives_zero_on_both_sides() {
        let n = 300;
        let x = gaussian_rows(n, 2, 4);
        let c = [0.7f32, -1.2];
        let z0 = Tensor::new(x.shape(), x.data().chunks(2).flat_map(|p| [p[0] + c[0], p[1] + c[1]]).collect()).unwrap();
        let ae = AutoEncoder::identity((1, 1, 2));
        let field = ConstantField(Tensor::new(&[2, 1, 1], vec![-c[0], -c[1]]).unwrap());
        let cfg = BoundConfig { sigma_min: 0.0, lipschitz: small_lip(), ..BoundConfig::default() };
        let rep = verify_bound(&ae, &field, &x, &z0, &cfg).unwrap();
        assert!(rep.lhs < 1e-2 && rep.rhs < 1e-2, "{rep:?}");
        assert!(rep.rhs >= rep.delta_ed.sqrt());
        assert_eq!(rep.lip_field, 0.0);
    }

    #[test]
    fn refuses_small_samples() {
        let x = gaussian_rows(50, 2, 5);
        let ae = AutoEncoder::identity((1, 1, 2));
        let field = FnField(|z: &Tensor<f32>, _t: &[f32]| z.clone());
        assert!(verify_bound(&ae, &field, &x, &x, &BoundConfig::default()).is_err());
    }
}
