//! Few-step inference: coarse latent, added noise, forward Euler on the
//! learned field over `t_i = i/M`, decode.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{to_batch, Image};
use crate::latent::AutoEncoder;
use crate::lcfm::{eval_field, Field, FlowModel, ParamField};
use crate::numerics::{Real, Tensor};
use crate::rng;

/// Euler steps used by the flow-matching baseline.
pub const LATENT_FM_STEPS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestoreConfig {
    #[serde(rename = "M")]
    pub m: usize,
    /// `None` reuses the training `σ_s`.
    pub sigma_s: Option<f64>,
    pub seed: u64,
    pub use_ema: bool,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self { m: 3, sigma_s: None, seed: 0, use_ema: true }
    }
}

impl RestoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("M", format!("must be at least 1, got {}", self.m)));
        }
        if let Some(s) = self.sigma_s {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("sigma_s", format!("must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// `M` forward-Euler steps of size `1/M` from `t = 0` to `t = 1`.
pub fn euler_solve<R: Real>(z0: &Tensor<R>, field: &dyn Field<R>, m: usize) -> Result<Tensor<R>> {
    ensure!(m >= 1, "Euler needs at least one step");
    ensure!(z0.rank() >= 1, "Euler needs a batched latent");
    let n = z0.shape()[0];
    let dt = 1.0 / m as f64;
    let mut z = z0.clone();
    for i in 0..m {
        let t = vec![R::from_f64(i as f64 * dt); n];
        let v = eval_field(field, &z, &t)?;
        z = z.zip_map(&v, |a, b| a + R::from_f64(dt) * b)?;
        if !z.all_finite() {
            return Err(Error::numeric(format!("Euler iterate became non-finite at step {i} of {m}")));
        }
    }
    Ok(z)
}

/// The initial point `z0 = g(E_ω(y)) + ε`.
pub fn initial_point(y: &Tensor<f32>, ae: &AutoEncoder, model: &FlowModel, cfg: &RestoreConfig) -> Result<Tensor<f32>> {
    let z = model.source_latent(ae, y)?;
    let sigma = cfg.sigma_s.unwrap_or(model.flow.sigma_s);
    if sigma == 0.0 {
        return Ok(z);
    }
    let mut r = rng::stream(cfg.seed, "restore/noise");
    let eps = rng::normals(&mut r, z.len(), sigma);
    Tensor::new(z.shape(), z.data().iter().zip(&eps).map(|(&a, &e)| a + e as f32).collect())
}

/// Restored latents `ẑ1` for a batch of LQ images `(N, C, H, W)`.
pub fn restore_latent(y: &Tensor<f32>, ae: &AutoEncoder, model: &FlowModel, cfg: &RestoreConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let z0 = initial_point(y, ae, model, cfg)?;
    let theta = if cfg.use_ema { &model.theta_ema } else { &model.theta };
    euler_solve(&z0, &ParamField { arch: &model.field_arch, params: theta }, cfg.m)
}

/// Restores LQ images; outputs are clipped to `[0, 1]`.
pub fn restore(y: &[Image], ae: &AutoEncoder, model: &FlowModel, cfg: &RestoreConfig) -> Result<Vec<Image>> {
    let yt = to_batch(y)?;
    let z1 = restore_latent(&yt, ae, model, cfg)?;
    ae.decode_images(&z1)
}

/// Same contract as [`restore`] for a model trained with identity encoder and decoder.
pub fn baseline_pixel_cfm(y: &[Image], pixel_ae: &AutoEncoder, model: &FlowModel, cfg: &RestoreConfig) -> Result<Vec<Image>> {
    ensure!(pixel_ae.latent_dim() == pixel_ae.image_dims.0 * pixel_ae.image_dims.1 * pixel_ae.image_dims.2, "pixel-space baseline needs an identity autoencoder");
    restore(y, pixel_ae, model, cfg)
}

/// [`restore`] with the flow-matching baseline's step count.
pub fn baseline_latent_fm(y: &[Image], ae: &AutoEncoder, model: &FlowModel, cfg: &RestoreConfig) -> Result<Vec<Image>> {
    restore(y, ae, model, &RestoreConfig { m: LATENT_FM_STEPS, ..*cfg })
}
