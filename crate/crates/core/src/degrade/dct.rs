//! Block-DCT stand-in for a JPEG round trip.
//!
//! Each 8×8 block (per channel, intensities scaled to 0–255) goes through an
//! orthonormal DCT-II, a uniform scalar quantizer with step `s(q)` on the AC
//! coefficients, and the inverse transform. The DC coefficient passes through
//! unquantized, so flat blocks survive every quality. A step of 1 is the
//! lossless setting: the quantizer is bypassed. Images are reflect-padded to a multiple of 8 and cropped back.

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::blur::reflect;
use crate::error::{ensure, Result};
use crate::image::Image;

pub const BLOCK: usize = 8;

/// Default base step, on the 0–255 scale, at quality 50.
pub const DEFAULT_BASE: f64 = 16.0;

fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static B: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; BLOCK];
        for (k, row) in b.iter_mut().enumerate() {
            let a = if k == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * n + 1) as f64 * k as f64 * PI / (2 * BLOCK) as f64).cos();
            }
        }
        b
    })
}

/// `s(q) = max(1, round(50/q · base))`.
pub fn quant_step(q: u32, base: f64) -> Result<f64> {
    ensure!((1..=100).contains(&q), "quality must lie in [1, 100], got {q}");
    ensure!(base > 0.0 && base.is_finite(), "quantizer base must be positive, got {base}");
    Ok((50.0 / q as f64 * base).round().max(1.0))
}

/// 2-D orthonormal DCT-II of one block.
pub fn forward_block(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for u in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[u * BLOCK + x] = (0..BLOCK).map(|y| b[u][y] * block[y * BLOCK + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u * BLOCK + v] = (0..BLOCK).map(|x| b[v][x] * tmp[u * BLOCK + x]).sum();
        }
    }
    out
}

/// Inverse of [`forward_block`] (DCT-III with the same normalization).
pub fn inverse_block(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..BLOCK {
        for v in 0..BLOCK {
            tmp[y * BLOCK + v] = (0..BLOCK).map(|u| b[u][y] * coef[u * BLOCK + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y * BLOCK + x] = (0..BLOCK).map(|v| b[v][x] * tmp[y * BLOCK + v]).sum();
        }
    }
    out
}

fn blockwise(x: &Image, mut f: impl FnMut(&mut [f64; 64])) -> Result<Image> {
    let (h, w, c) = x.dims();
    let ph = h.div_ceil(BLOCK) * BLOCK;
    let pw = w.div_ceil(BLOCK) * BLOCK;
    let mut out = x.clone();
    let mut block = [0.0; 64];
    for ch in 0..c {
        for by in (0..ph).step_by(BLOCK) {
            for bx in (0..pw).step_by(BLOCK) {
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        let sy = reflect((by + i) as isize, h);
                        let sx = reflect((bx + j) as isize, w);
                        block[i * BLOCK + j] = x.get(sy, sx, ch) as f64 * 255.0;
                    }
                }
                f(&mut block);
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        let (y, xx) = (by + i, bx + j);
                        if y < h && xx < w {
                            out.set(y, xx, ch, (block[i * BLOCK + j] / 255.0) as f32);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// [`dct_compress_with_base`] at [`DEFAULT_BASE`].
pub fn dct_compress(x: &Image, q: u32) -> Result<Image> {
    dct_compress_with_base(x, q, DEFAULT_BASE)
}

/// Transform, quantize with step `s(q)`, dequantize, invert.
pub fn dct_compress_with_base(x: &Image, q: u32, base: f64) -> Result<Image> {
    let step = quant_step(q, base)?;
    if step <= 1.0 {
        return Ok(x.clone());
    }
    blockwise(x, |block| {
        let coef = forward_block(block);
        let mut quant = coef.map(|v| (v / step).round() * step);
        quant[0] = coef[0];
        *block = inverse_block(&quant);
    })
}

/// Forward and inverse transform with no quantization in between.
pub fn dct_round_trip(x: &Image) -> Result<Image> {
    blockwise(x, |block| *block = inverse_block(&forward_block(block)))
}
