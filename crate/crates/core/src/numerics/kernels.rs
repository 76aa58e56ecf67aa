//! Inner loops for dense products and convolution lowering.
//!
//! Every product accumulates in `f64` regardless of the storage type.

use super::Real;

const LANES: usize = 8;

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    use std::sync::OnceLock;
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| std::arch::is_x86_feature_detected!("avx2"))
}

/// `Σ a[i]·b[i]` with lane-split `f64` accumulators so the loop vectorizes.
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    dot_portable(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2<R: Real>(a: &[R], b: &[R]) -> f64 {
    dot_portable(a, b)
}

#[inline(always)]
fn dot_portable<R: Real>(a: &[R], b: &[R]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l].to_f64() * xb[l].to_f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.to_f64() * y.to_f64();
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn axpy<R: Real>(acc: &mut [f64], alpha: f64, x: &[R]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime.
        return unsafe { axpy_avx2(acc, alpha, x) };
    }
    axpy_portable(acc, alpha, x)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2<R: Real>(acc: &mut [f64], alpha: f64, x: &[R]) {
    axpy_portable(acc, alpha, x)
}

#[inline(always)]
fn axpy_portable<R: Real>(acc: &mut [f64], alpha: f64, x: &[R]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v.to_f64();
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let row = &a[i * k..(i + 1) * k];
        for (kk, &av) in row.iter().enumerate() {
            let av = av.to_f64();
            if av != 0.0 {
                axpy(&mut acc, av, &b[kk * n..(kk + 1) * n]);
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = R::from_f64(v);
        }
    }
    out
}

/// `out (m×n) = a (m×k) · bᵀ` where `b` is stored `n×k`.
pub fn matmul_bt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = R::from_f64(dot(row, &b[j * k..(j + 1) * k]));
        }
    }
    out
}

/// `out (m×n) = aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn matmul_at<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let av = a[kk * m + i].to_f64();
            if av != 0.0 {
                axpy(&mut acc, av, &b[kk * n..(kk + 1) * n]);
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = R::from_f64(v);
        }
    }
    out
}

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (kh, kw) = (kernel[2], kernel[3]);
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Some(Self { n, c_in, h, w, kh, kw, stride, pad, h_out, w_out })
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.n * self.h_out * self.w_out
    }
}

/// Output indices `o` with `0 <= o·stride + k − pad < size`, as a half-open range.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o·stride >= pad − k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o·stride <= size − 1 + pad − k
    let hi = if size + pad > k { (size - 1 + pad - k) / stride + 1 } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Lowers `x (n, c, h, w)` into a `(c·kh·kw) × (n·h_out·w_out)` patch matrix.
pub fn im2col<R: Real>(x: &[R], g: &ConvGeom) -> Vec<R> {
    let cols = g.cols();
    let plane = g.h_out * g.w_out;
    let mut out = vec![R::ZERO; g.rows() * cols];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h_out, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w_out, g.w, kx, g.stride, g.pad);
                if ox0 == ox1 {
                    continue;
                }
                let r = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[r * cols..(r + 1) * cols];
                let ix0 = ox0 * g.stride + kx - g.pad;
                for b in 0..g.n {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &mut dst[b * plane + oy * g.w_out + ox0..b * plane + oy * g.w_out + ox1];
                        let srow = &src[iy * g.w + ix0..];
                        if g.stride == 1 {
                            drow.copy_from_slice(&srow[..drow.len()]);
                        } else {
                            for (j, d) in drow.iter_mut().enumerate() {
                                *d = srow[j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub fn col2im<R: Real>(cols_data: &[R], g: &ConvGeom) -> Vec<R> {
    let cols = g.cols();
    let plane = g.h_out * g.w_out;
    let mut out = vec![R::ZERO; g.n * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h_out, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w_out, g.w, kx, g.stride, g.pad);
                if ox0 == ox1 {
                    continue;
                }
                let r = (c * g.kh + ky) * g.kw + kx;
                let src = &cols_data[r * cols..(r + 1) * cols];
                let ix0 = ox0 * g.stride + kx - g.pad;
                for b in 0..g.n {
                    let dst = &mut out[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[b * plane + oy * g.w_out + ox0..b * plane + oy * g.w_out + ox1];
                        let drow = &mut dst[iy * g.w + ix0..];
                        for (j, &v) in srow.iter().enumerate() {
                            drow[j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(n, c, p)` → `(c, n·p)`.
pub fn batch_to_channel_major<R: Real>(x: &[R], n: usize, c: usize, p: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `(c, n·p)` → `(n, c, p)`.
pub fn channel_major_to_batch<R: Real>(x: &[R], n: usize, c: usize, p: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[ch * n * p + b * p..][..p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 13) as f64 - 6.0) / 5.0).collect();
        let want = naive(&a, &b, m, k, n);
        let close = |x: &[f64]| x.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul(&a, &b, m, k, n)));
        assert!(close(&matmul_bt(&a, &transpose(&b, k, n), m, k, n)));
        assert!(close(&matmul_at(&transpose(&a, m, k), &b, m, k, n)));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let g = ConvGeom::new(&[2, 3, 5, 4], &[1, 3, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs = dot(&im2col(&x, &g), &y);
        let rhs = dot(&x, &col2im(&y, &g));
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
