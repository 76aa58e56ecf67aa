//! Synthetic degradation `y = clip({[(x ⊛ k_σ)↓r + n_δ]_Q}↑r)`.
//!
//! Stages run in bracket order on unclipped values; the only clip is the last
//! step. Compression is a single-step block-DCT quantizer, see [`dct`].

pub mod blur;
pub mod dct;
pub mod resample;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng;

pub use blur::{gaussian_blur, gaussian_kernel_1d, gaussian_kernel_2d};
pub use dct::{dct_compress, dct_compress_with_base, quant_step};
pub use resample::{resample, resize_bilinear, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub sigma: f64,
    pub r: f64,
    pub delta: f64,
    pub q: u32,
    pub kernel_size: usize,
    /// Quantizer step at `q = 50`, on the 0–255 scale.
    pub dct_base: f64,
}

impl DegradationParams {
    /// Every stage is the identity: no blur, no resampling, no noise, unit quantizer step.
    pub fn identity() -> Self {
        Self { sigma: 0.0, r: 1.0, delta: 0.0, q: 100, kernel_size: 9, dct_base: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.sigma >= 0.0 && self.sigma.is_finite(), "sigma must be >= 0, got {}", self.sigma);
        ensure!(self.r > 0.0 && self.r.is_finite(), "r must be > 0, got {}", self.r);
        ensure!(self.delta >= 0.0 && self.delta.is_finite(), "delta must be >= 0, got {}", self.delta);
        ensure!((1..=100).contains(&self.q), "q must lie in [1, 100], got {}", self.q);
        ensure!(self.kernel_size % 2 == 1, "kernel_size must be odd, got {}", self.kernel_size);
        ensure!(self.dct_base > 0.0 && self.dct_base.is_finite(), "dct_base must be > 0, got {}", self.dct_base);
        Ok(())
    }
}

/// Inclusive `(lo, hi)` sampling ranges. `delta` is in unit-intensity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRanges {
    pub sigma: (f64, f64),
    pub r: (f64, f64),
    pub delta: (f64, f64),
    pub q: (u32, u32),
    pub kernel_size: usize,
    pub dct_base: f64,
}

impl Default for ParamRanges {
    /// The full-resolution ranges, with noise converted from the 0–255 scale.
    fn default() -> Self {
        Self { sigma: (0.1, 15.0), r: (0.8, 32.0), delta: (0.0, 20.0 / 255.0), q: (30, 100), kernel_size: 41, dct_base: dct::DEFAULT_BASE }
    }
}

impl ParamRanges {
    /// Ranges that keep a 16×16 image recognisable: at most 4× resampling, a 9-tap kernel.
    pub fn desk() -> Self {
        Self { sigma: (0.1, 2.0), r: (1.0, 4.0), delta: (0.0, 20.0 / 255.0), q: (30, 100), kernel_size: 9, dct_base: dct::DEFAULT_BASE }
    }

    /// Every draw is [`DegradationParams::identity`].
    pub fn identity() -> Self {
        let p = DegradationParams::identity();
        Self { sigma: (p.sigma, p.sigma), r: (p.r, p.r), delta: (p.delta, p.delta), q: (p.q, p.q), kernel_size: p.kernel_size, dct_base: p.dct_base }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("sigma", self.sigma), ("r", self.r), ("delta", self.delta)] {
            ensure!(lo <= hi, "{name} range is inverted: ({lo}, {hi})");
        }
        ensure!(self.q.0 <= self.q.1, "q range is inverted: {:?}", self.q);
        let lo = DegradationParams { sigma: self.sigma.0, r: self.r.0, delta: self.delta.0, q: self.q.0, kernel_size: self.kernel_size, dct_base: self.dct_base };
        let hi = DegradationParams { sigma: self.sigma.1, r: self.r.1, delta: self.delta.1, q: self.q.1, ..lo };
        lo.validate()?;
        hi.validate()
    }
}

/// Adds i.i.d. `N(0, delta²)` per value; no clipping.
pub fn add_noise(x: &Image, delta: f64, seed: u64) -> Result<Image> {
    ensure!(delta >= 0.0 && delta.is_finite(), "noise std must be >= 0, got {delta}");
    if delta == 0.0 {
        return Ok(x.clone());
    }
    let mut r = rng::stream(seed, "degrade/noise");
    Ok(x.map(|v| (v as f64 + delta * rng::normal(&mut r)) as f32))
}

/// Blur, downsample, add noise, compress, upsample to the original size, clip.
pub fn degrade(x: &Image, p: &DegradationParams, seed: u64) -> Result<Image> {
    p.validate()?;
    let (h, w, _) = x.dims();
    let y = gaussian_blur(x, p.sigma, p.kernel_size)?;
    let y = resample(&y, p.r, Direction::Down)?;
    let y = add_noise(&y, p.delta, seed)?;
    let y = dct_compress_with_base(&y, p.q, p.dct_base)?;
    let y = resize_bilinear(&y, h, w)?;
    Ok(y.clip_unit())
}

/// Independent uniform draws; `q` is drawn on the reals and rounded.
pub fn sample_params(ranges: &ParamRanges, seed: u64) -> Result<DegradationParams> {
    ranges.validate()?;
    let mut r = rng::stream(seed, "degrade/params");
    let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * r.random::<f64>();
    let sigma = uniform(ranges.sigma);
    let rr = uniform(ranges.r);
    let delta = uniform(ranges.delta);
    let q = uniform((ranges.q.0 as f64, ranges.q.1 as f64)).round() as u32;
    Ok(DegradationParams { sigma, r: rr, delta, q, kernel_size: ranges.kernel_size, dct_base: ranges.dct_base })
}
