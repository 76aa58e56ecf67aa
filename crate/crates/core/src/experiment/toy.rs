//! Two-dimensional toy task for the W₂ bound: an identity autoencoder, so
//! `Δ_ED = 0` and `L_D = 1`, and a small time-conditioned MLP field trained by
//! flow matching from `z0 = y + ε` to `z1 = x`.

use crate::error::Result;
use crate::eval::bound::{verify_bound, BoundConfig, BoundReport};
use crate::latent::AutoEncoder;
use crate::lcfm::{FlowConfig, FlowModel, Objective, ParamField, Source, TrainConfig, Trainer};
use crate::nets::Arch;
use crate::numerics::{AdamWConfig, Tensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub train_steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub test_pairs: usize,
    /// Observation model `y = scale·x + N(0, noise²)`.
    pub scale: f64,
    pub noise: f64,
    pub sigma_s: f64,
    pub euler_steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { train_steps: 1500, batch: 128, hidden: 32, test_pairs: 1000, scale: 0.6, noise: 0.3, sigma_s: 0.1, euler_steps: 50 }
    }
}

/// `x ~ N((1, −1), diag(1, 0.25))` and its observation, shaped `(n, 2, 1, 1)`.
pub fn toy_pairs(n: usize, cfg: &ToyConfig, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut r = rng::stream(seed, "toy/pairs");
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let p = [1.0 + rng::normal(&mut r), -1.0 + 0.5 * rng::normal(&mut r)];
        for v in p {
            x.push(v as f32);
            y.push((cfg.scale * v + cfg.noise * rng::normal(&mut r)) as f32);
        }
    }
    Ok((Tensor::new(&[n, 2, 1, 1], x)?, Tensor::new(&[n, 2, 1, 1], y)?))
}

/// Trains the toy field for one seed and returns it with the identity autoencoder.
pub fn train_toy(cfg: &ToyConfig, seed: u64) -> Result<(AutoEncoder, FlowModel)> {
    let ae = AutoEncoder::identity((1, 1, 2));
    let flow = FlowConfig { sigma_s: cfg.sigma_s, ..FlowConfig::default() };
    let field = Arch::Mlp { dims: vec![2, cfg.hidden, cfg.hidden, 2], time: true };
    let model = FlowModel::new(&ae, Source::FrozenEncoder, Arch::Identity, field, flow, rng::derive(seed, "toy/model"));
    let tcfg = TrainConfig { flow, objective: Objective::FlowMatching, source: Source::FrozenEncoder, optim: AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..AdamWConfig::default() }, ema_decay: 0.99 };
    let mut trainer = Trainer::new(tcfg, model, rng::derive(seed, "toy/trainer"))?;
    let (x, y) = toy_pairs(cfg.train_steps * cfg.batch, cfg, rng::derive(seed, "toy/train"))?;
    let row = 2;
    for s in 0..cfg.train_steps {
        let lo = s * cfg.batch * row;
        let hi = lo + cfg.batch * row;
        let xb = Tensor::new(&[cfg.batch, 2, 1, 1], x.data()[lo..hi].to_vec())?;
        let yb = Tensor::new(&[cfg.batch, 2, 1, 1], y.data()[lo..hi].to_vec())?;
        trainer.step(&ae, &xb, &yb)?;
    }
    Ok((ae, trainer.model))
}

/// Trains a toy field and checks the bound on fresh held-out pairs.
pub fn toy_bound(cfg: &ToyConfig, seed: u64) -> Result<BoundReport> {
    let (ae, model) = train_toy(cfg, seed)?;
    let (x, y) = toy_pairs(cfg.test_pairs, cfg, rng::derive(seed, "toy/test"))?;
    let mut r = rng::stream(seed, "toy/eps");
    let eps = rng::normals(&mut r, y.len(), cfg.sigma_s);
    let z0 = Tensor::new(y.shape(), y.data().iter().zip(&eps).map(|(&a, &e)| a + e as f32).collect())?;
    let field = ParamField { arch: &model.field_arch, params: &model.theta_ema };
    let bcfg = BoundConfig { euler_steps: cfg.euler_steps, sigma_min: model.flow.sigma_min, seed: rng::derive(seed, "toy/bound"), ..BoundConfig::default() };
    verify_bound(&ae, &field, &x, &z0, &bcfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_toy_run_gives_a_finite_report() {
        let cfg = ToyConfig { train_steps: 20, test_pairs: 200, ..ToyConfig::default() };
        let r = toy_bound(&cfg, 1).unwrap();
        assert_eq!(r.delta_ed, 0.0);
        assert!((r.lip_decoder - 1.0).abs() < 1e-3, "{}", r.lip_decoder);
        assert!(r.lhs.is_finite() && r.rhs.is_finite());
    }
}
