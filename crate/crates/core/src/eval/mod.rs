//! Distortion and perception metrics.
//!
//! Distortion is per image pair (MSE, PSNR, SSIM). Perception is per set:
//! the exact discrete W₂ between restored and reference images, and the
//! Fréchet distance between Gaussians fitted to raw pixels. The pixel
//! Fréchet score is a surrogate for FID and only its trends are meaningful.

pub mod bound;
pub mod ot;

use std::fmt::Write as _;

use crate::degrade::gaussian_kernel_1d;
use crate::error::{ensure, Result};
use crate::image::Image;

pub use bound::{lipschitz_estimate, lipschitz_ratios, verify_bound, BoundConfig, BoundReport, LipschitzConfig};
pub use ot::{frechet, hungarian, moments, sqrtm_psd, w2_empirical, w2_gaussian, Points, FRECHET_SHRINKAGE};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_dims(x: &Image, y: &Image) -> Result<()> {
    ensure!(x.dims() == y.dims(), "image shapes differ: {:?} vs {:?}", x.dims(), y.dims());
    Ok(())
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    same_dims(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(s / x.len() as f64)
}

/// `10·log10(max_val² / MSE)`, or [`PSNR_CAP`] when the images are equal.
pub fn psnr(x: &Image, y: &Image, max_val: f64) -> Result<f64> {
    psnr_capped(x, y, max_val, PSNR_CAP)
}

pub fn psnr_capped(x: &Image, y: &Image, max_val: f64, cap: f64) -> Result<f64> {
    ensure!(max_val > 0.0, "PSNR peak must be positive, got {max_val}");
    Ok(psnr_from_mse(mse(x, y)?, max_val, cap))
}

pub fn psnr_from_mse(mse: f64, max_val: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        return cap;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(cap)
}

/// Single-scale SSIM on the `[0, 1]` range with an 11-tap Gaussian window
/// (σ = 1.5) over the valid region, averaged over positions and channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    same_dims(x, y)?;
    let (h, w, c) = x.dims();
    ensure!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}");
    let k = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW)?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = x.plane(ch).into_iter().map(f64::from).collect();
        let b: Vec<f64> = y.plane(ch).into_iter().map(f64::from).collect();
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        let wgt = ky * kx;
                        let i = (oy + dy) * w + ox + dx;
                        ma += wgt * a[i];
                        mb += wgt * b[i];
                        saa += wgt * a[i] * a[i];
                        sbb += wgt * b[i] * b[i];
                        sab += wgt * (a[i] * b[i]);
                    }
                }
                // Every product is written commutatively so that ssim(a, b) == ssim(b, a) bitwise.
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - (ma * mb);
                total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Distortion averaged over pairs plus set-level perception scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mse: f64,
    pub psnr: f64,
    pub psnr_median: f64,
    pub ssim: f64,
    pub w2_empirical: f64,
    pub frechet: f64,
    pub n_restored: usize,
    pub n_reference: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "mse,psnr,psnr_median,ssim,w2_empirical,frechet,n_restored,n_reference";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{}",
            self.mse, self.psnr, self.psnr_median, self.ssim, self.w2_empirical, self.frechet, self.n_restored, self.n_reference
        );
        s
    }
}

/// Scores `restored[i]` against `reference[i]`. SSIM is skipped (NaN) for
/// images smaller than its window.
pub fn evaluate_images(restored: &[Image], reference: &[Image]) -> Result<MetricsReport> {
    ensure!(!restored.is_empty(), "nothing to evaluate");
    ensure!(restored.len() == reference.len(), "{} restored images for {} references", restored.len(), reference.len());
    let n = restored.len() as f64;
    let mut mses = Vec::with_capacity(restored.len());
    let mut psnrs = Vec::with_capacity(restored.len());
    let mut ssim_sum = 0.0;
    let small = restored[0].height() < SSIM_WINDOW || restored[0].width() < SSIM_WINDOW;
    for (a, b) in restored.iter().zip(reference) {
        let m = mse(a, b)?;
        mses.push(m);
        psnrs.push(psnr_from_mse(m, 1.0, PSNR_CAP));
        if !small {
            ssim_sum += ssim(a, b)?;
        }
    }
    let pa = Points::from_images(restored)?;
    let pb = Points::from_images(reference)?;
    Ok(MetricsReport {
        mse: mses.iter().sum::<f64>() / n,
        psnr: psnrs.iter().sum::<f64>() / n,
        psnr_median: median(&psnrs),
        ssim: if small { f64::NAN } else { ssim_sum / n },
        w2_empirical: w2_empirical(&pa, &pb)?,
        frechet: frechet(&pa, &pb)?,
        n_restored: restored.len(),
        n_reference: reference.len(),
    })
}

/// Per-image PSNR on `[0, 1]`.
pub fn psnr_each(restored: &[Image], reference: &[Image]) -> Result<Vec<f64>> {
    ensure!(restored.len() == reference.len(), "{} restored images for {} references", restored.len(), reference.len());
    restored.iter().zip(reference).map(|(a, b)| psnr(a, b, 1.0)).collect()
}
