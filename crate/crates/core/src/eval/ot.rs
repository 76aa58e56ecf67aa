//! Exact optimal transport between equal-size point sets, and its Gaussian
//! closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::numerics::{Real, Tensor};

/// Largest set the cubic assignment solver accepts.
pub const MAX_MATCHING: usize = 4096;
/// Diagonal loading used when a covariance cannot have full rank.
pub const FRECHET_SHRINKAGE: f64 = 1e-6;

/// `n` points in `R^dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(dim > 0, "points need at least one coordinate");
        ensure!(data.len() == n * dim, "{} values cannot form {n} points of dimension {dim}", data.len());
        Ok(Self { n, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "empty point set");
        let dim = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == dim), "ragged point rows");
        Self::new(rows.len(), dim, rows.concat())
    }

    /// One point per batch row.
    pub fn from_tensor<R: Real>(t: &Tensor<R>) -> Result<Self> {
        ensure!(t.rank() >= 1 && t.shape()[0] > 0, "need a non-empty batch, got {:?}", t.shape());
        let n = t.shape()[0];
        Self::new(n, t.len() / n, t.data().iter().map(|v| v.to_f64()).collect())
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        ensure!(!images.is_empty(), "empty image set");
        let dims = images[0].dims();
        ensure!(images.iter().all(|i| i.dims() == dims), "mixed image sizes");
        let data = images.iter().flat_map(|i| i.data().iter().map(|&v| v as f64)).collect();
        Self::new(images.len(), images[0].len(), data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Applies `f` to every point.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.n).map(|i| f(self.row(i))).collect();
        Self::from_rows(&rows)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect matching on a square row-major cost matrix by the
/// shortest-augmenting-path Hungarian method with potentials. Returns the
/// column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    ensure!(cost.len() == n * n, "cost matrix has {} entries, expected {n}x{n}", cost.len());
    ensure!(cost.iter().all(|c| c.is_finite()), "cost matrix has non-finite entries");
    // 1-based with a virtual column 0; p[j] is the row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Exact discrete W₂ between equal-size samples: the square root of the mean
/// squared Euclidean cost of the optimal matching.
pub fn w2_empirical(a: &Points, b: &Points) -> Result<f64> {
    ensure!(a.len() == b.len(), "W2 needs equal sample sizes, got {} and {}", a.len(), b.len());
    ensure!(a.dim() == b.dim(), "W2 needs equal dimensions, got {} and {}", a.dim(), b.dim());
    ensure!(!a.is_empty() && a.len() <= MAX_MATCHING, "W2 sample size must be in 1..={MAX_MATCHING}, got {}", a.len());
    let n = a.len();
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(sq_dist(a.row(i), b.row(j)));
        }
    }
    let assign = hungarian(&cost, n)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Sample mean and unbiased covariance.
pub fn moments(p: &Points) -> Result<(DVector<f64>, DMatrix<f64>)> {
    ensure!(p.len() >= 2, "covariance needs at least two points, got {}", p.len());
    let (n, d) = (p.len(), p.dim());
    let x = DMatrix::from_row_slice(n, d, &p.data);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn check_symmetric(s: &DMatrix<f64>, what: &str) -> Result<()> {
    ensure!(s.is_square(), "{what} is not square");
    let scale = s.amax().max(1.0);
    let asym = (s - s.transpose()).amax();
    ensure!(asym <= 1e-9 * scale, "{what} is not symmetric (asymmetry {asym:e})");
    Ok(())
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues down to
/// `−1e-9·max(1, λ_max)` are rounding and are clamped to 0.
pub fn sqrtm_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(s, "matrix")?;
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.max().max(1.0);
    let low = eig.eigenvalues.min();
    if low < -1e-9 * top {
        return Err(Error::contract(format!("matrix is not positive semi-definite (eigenvalue {low:e})")));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `√(‖m1−m2‖² + tr(S1 + S2 − 2(S2^½ S1 S2^½)^½))`.
pub fn w2_gaussian(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    ensure!(m2.len() == d && s1.shape() == (d, d) && s2.shape() == (d, d), "Gaussian moments disagree on dimension");
    let r2 = sqrtm_psd(s2)?;
    sqrtm_psd(s1)?;
    let inner = &r2 * s1 * &r2;
    let cross = sqrtm_psd(&((&inner + inner.transpose()) * 0.5))?;
    let sq = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(sq.max(0.0).sqrt())
}

/// Squared W₂ between Gaussians fitted to each set. Covariances get
/// [`FRECHET_SHRINKAGE`] on the diagonal when a set has at most `dim` points.
pub fn frechet(a: &Points, b: &Points) -> Result<f64> {
    ensure!(a.dim() == b.dim(), "Fréchet needs equal dimensions, got {} and {}", a.dim(), b.dim());
    let (ma, mut sa) = moments(a)?;
    let (mb, mut sb) = moments(b)?;
    if a.len() <= a.dim() || b.len() <= b.dim() {
        for i in 0..a.dim() {
            sa[(i, i)] += FRECHET_SHRINKAGE;
            sb[(i, i)] += FRECHET_SHRINKAGE;
        }
    }
    Ok(w2_gaussian(&ma, &sa, &mb, &sb)?.powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn pts1(v: &[f64]) -> Points {
        Points::new(v.len(), 1, v.to_vec()).unwrap()
    }

    /// Brute force over all permutations.
    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn go(i: usize, n: usize, cost: &[f64], used: &mut Vec<bool>) -> f64 {
            if i == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[i * n + j] + go(i + 1, n, cost, used));
                    used[j] = false;
                }
            }
            best
        }
        go(0, n, cost, &mut vec![false; n])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut r = rng::stream(5, "test/hungarian");
        for n in 1..=7 {
            for _ in 0..20 {
                let cost = rng::normals(&mut r, n * n, 1.0).into_iter().map(f64::abs).collect::<Vec<_>>();
                let a = hungarian(&cost, n).unwrap();
                let mut seen = a.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
                assert!((got - brute_force(&cost, n)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn w2_examples() {
        let a = Points::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        assert_eq!(w2_empirical(&a, &a).unwrap(), 0.0);
        let p = Points::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let q = Points::from_rows(&[vec![4.0, 6.0]]).unwrap();
        assert!((w2_empirical(&p, &q).unwrap() - 5.0).abs() < 1e-12);
        assert!(w2_empirical(&a, &p).is_err());
    }

    #[test]
    fn w2_1d_equals_sorted_matching() {
        let mut r = rng::stream(11, "test/w2-1d");
        let a = rng::normals(&mut r, 300, 1.0);
        let b: Vec<f64> = rng::normals(&mut r, 300, 2.0).into_iter().map(|v| v + 0.5).collect();
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let sorted = (sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 300.0).sqrt();
        assert!((w2_empirical(&pts1(&a), &pts1(&b)).unwrap() - sorted).abs() < 1e-9);
    }

    #[test]
    fn gaussian_examples() {
        let m0 = DVector::from_vec(vec![0.0]);
        let m2 = DVector::from_vec(vec![2.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        let four = DMatrix::from_element(1, 1, 4.0);
        assert!((w2_gaussian(&m0, &one, &m2, &four).unwrap() - 5f64.sqrt()).abs() < 1e-12);
        assert!(w2_gaussian(&m0, &one, &m0, &one).unwrap() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let d = DVector::from_vec(vec![3.0, -4.0]);
        let z = DVector::zeros(2);
        assert!((w2_gaussian(&z, &s, &d, &s).unwrap() - 5.0).abs() < 1e-9);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(w2_gaussian(&z, &bad, &z, &s).is_err());
    }

    #[test]
    fn sqrtm_squares_back() {
        let s = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sqrtm_psd(&s).unwrap();
        assert!((&r * &r - &s).amax() < 1e-12);
    }

    #[test]
    fn frechet_examples() {
        let mut r = rng::stream(3, "test/frechet");
        let rows: Vec<Vec<f64>> = (0..400).map(|_| rng::normals(&mut r, 3, 1.0)).collect();
        let a = Points::from_rows(&rows).unwrap();
        assert!(frechet(&a, &a).unwrap() < 1e-4);
        let d = [0.5, -1.0, 2.0];
        let b = a.map_rows(|p| p.iter().zip(&d).map(|(x, y)| x + y).collect()).unwrap();
        let d2: f64 = d.iter().map(|v| v * v).sum();
        assert!((frechet(&a, &b).unwrap() - d2).abs() < 1e-8);
        let (ma, sa) = moments(&a).unwrap();
        let c = a.map_rows(|p| vec![p[0] * 2.0, p[1] + p[2], p[2]]).unwrap();
        let (mc, sc) = moments(&c).unwrap();
        assert!((frechet(&a, &c).unwrap() - w2_gaussian(&ma, &sa, &mc, &sc).unwrap().powi(2)).abs() < 1e-8);
    }

    #[test]
    fn frechet_shrinks_small_sets() {
        let a = Points::from_rows(&[vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0]]).unwrap();
        assert!(frechet(&a, &a).unwrap() < 1e-4);
    }
}
