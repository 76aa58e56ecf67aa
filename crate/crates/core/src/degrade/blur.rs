use crate::error::{ensure, Result};
use crate::image::Image;

/// Below this standard deviation the blur kernel degenerates to a delta.
pub const MIN_SIGMA: f64 = 1e-6;

/// Normalized 1-D Gaussian taps, built in `f64`.
pub fn gaussian_kernel_1d(sigma: f64, size: usize) -> Result<Vec<f64>> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), "blur sigma must be finite and non-negative, got {sigma}");
    ensure!(size % 2 == 1, "kernel size must be odd, got {size}");
    let r = (size / 2) as f64;
    if sigma < MIN_SIGMA {
        let mut k = vec![0.0; size];
        k[size / 2] = 1.0;
        return Ok(k);
    }
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / s).collect())
}

/// Outer product of the 1-D taps, row-major `size × size`.
pub fn gaussian_kernel_2d(sigma: f64, size: usize) -> Result<Vec<f64>> {
    let k = gaussian_kernel_1d(sigma, size)?;
    Ok(k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect())
}

/// Mirror index without repeating the edge sample (`… 2 1 | 0 1 2 … n-1 | n-2 …`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflective boundaries.
pub fn gaussian_blur(x: &Image, sigma: f64, kernel_size: usize) -> Result<Image> {
    let k = gaussian_kernel_1d(sigma, kernel_size)?;
    if sigma < MIN_SIGMA {
        return Ok(x.clone());
    }
    let (h, w, c) = x.dims();
    let r = (kernel_size / 2) as isize;
    let mut tmp = vec![0f64; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sx = reflect(xx as isize + t as isize - r, w);
                    acc += kv * x.get(y, sx, ch) as f64;
                }
                tmp[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0f32; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[(sy * w + xx) * c + ch];
                }
                out[(y * w + xx) * c + ch] = acc as f32;
            }
        }
    }
    Image::new(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.1, 0.7, 2.0, 15.0] {
            for size in [9, 21, 41] {
                let s: f64 = gaussian_kernel_2d(sigma, size).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "sigma {sigma} size {size}: {s}");
            }
        }
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let img = Image::from_fn(7, 5, 2, |y, x, c| (y * 7 + x * 3 + c) as f32 / 50.0);
        assert_eq!(gaussian_blur(&img, 1e-7, 9).unwrap(), img);
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let (n, size, sigma) = (17, 9, 1.3);
        let mut img = Image::filled(n, n, 1, 0.0);
        img.set(8, 8, 0, 1.0);
        let out = gaussian_blur(&img, sigma, size).unwrap();
        let k = gaussian_kernel_2d(sigma, size).unwrap();
        let mut total = 0.0;
        for y in 0..n {
            for x in 0..n {
                let v = out.get(y, x, 0) as f64;
                total += v;
                let inside = (4..13).contains(&y) && (4..13).contains(&x);
                let want = if inside { k[(y - 4) * size + (x - 4)] } else { 0.0 };
                assert!((v - want).abs() < 1e-7, "({y},{x}) {v} vs {want}");
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = Image::filled(12, 9, 3, 0.37);
        for sigma in [0.5, 3.0, 15.0] {
            let out = gaussian_blur(&img, sigma, 41).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn negative_sigma_and_even_kernels_are_rejected() {
        let img = Image::filled(4, 4, 1, 0.0);
        assert!(gaussian_blur(&img, -1.0, 9).is_err());
        assert!(gaussian_blur(&img, 1.0, 8).is_err());
    }

    #[test]
    fn reflection_handles_offsets_larger_than_the_image() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-20, 4), reflect(-20 + 6, 4));
        assert_eq!(reflect(5, 1), 0);
    }
}
