use crate::error::{ensure, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Bilinear resampling by `factor`. Down uses `floor(dim / factor)`, up uses
/// `round(dim · factor)`; use [`resize_bilinear`] to return to recorded dims.
pub fn resample(x: &Image, factor: f64, direction: Direction) -> Result<Image> {
    ensure!(factor > 0.0 && factor.is_finite(), "resample factor must be positive, got {factor}");
    let (h, w, _) = x.dims();
    let (nh, nw) = match direction {
        Direction::Down => ((h as f64 / factor).floor(), (w as f64 / factor).floor()),
        Direction::Up => ((h as f64 * factor).round(), (w as f64 * factor).round()),
    };
    ensure!(nh >= 1.0 && nw >= 1.0, "resampling {h}x{w} by {factor} ({direction:?}) leaves an empty image");
    resize_bilinear(x, nh as usize, nw as usize)
}

/// Half-pixel-centred bilinear interpolation with edge clamping.
pub fn resize_bilinear(x: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    ensure!(out_h >= 1 && out_w >= 1, "resize target {out_h}x{out_w} is empty");
    let (h, w, c) = x.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let mut out = Image::filled(out_h, out_w, c, 0.0);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let a = x.get(y0, x0, ch) as f64 * (1.0 - fx) + x.get(y0, x1, ch) as f64 * fx;
                let b = x.get(y1, x0, ch) as f64 * (1.0 - fx) + x.get(y1, x1, ch) as f64 * fx;
                out.set(oy, ox, ch, (a * (1.0 - fy) + b * fy) as f32);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_factor_is_identity() {
        let img = Image::from_fn(5, 6, 2, |y, x, c| (y * 13 + x * 5 + c) as f32 / 100.0);
        assert_eq!(resample(&img, 1.0, Direction::Down).unwrap(), img);
        assert_eq!(resample(&img, 1.0, Direction::Up).unwrap(), img);
    }

    #[test]
    fn constants_survive_any_factor() {
        let img = Image::filled(16, 16, 1, 0.42);
        for f in [0.8, 1.7, 3.0, 4.0, 15.9] {
            let d = resample(&img, f, Direction::Down).unwrap();
            let u = resize_bilinear(&d, 16, 16).unwrap();
            assert!(d.data().iter().chain(u.data()).all(|&v| (v - 0.42).abs() < 1e-6));
        }
    }

    #[test]
    fn checkerboard_collapses_to_its_mean() {
        // One output sample sits at source coordinate 0.5: the average of all four pixels.
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = resample(&img, 2.0, Direction::Down).unwrap();
        assert_eq!(d.dims(), (1, 1, 1));
        let u = resample(&d, 2.0, Direction::Up).unwrap();
        assert_eq!(u.dims(), (2, 2, 1));
        assert!(u.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn too_large_factor_is_rejected() {
        let img = Image::filled(16, 16, 1, 0.0);
        assert!(resample(&img, 17.0, Direction::Down).is_err());
        assert!(resample(&img, 0.0, Direction::Down).is_err());
    }
}
