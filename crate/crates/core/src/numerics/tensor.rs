//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::Debug;

use num_like::Real;

use crate::error::{ensure, Result};

pub(crate) mod num_like {
    use std::fmt::{Debug, Display};
    use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

    /// Element type of a [`Tensor`](super::Tensor).
    ///
    /// Reductions and dot products convert to `f64` before accumulating, so an
    /// `f32` tensor still sums in double precision.
    pub trait Real:
        Copy
        + Default
        + Debug
        + Display
        + PartialOrd
        + Send
        + Sync
        + 'static
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
    {
        const DTYPE: super::DType;
        const ZERO: Self;
        const ONE: Self;

        fn from_f64(v: f64) -> Self;
        fn to_f64(self) -> f64;
        fn exp(self) -> Self;
        fn is_finite(self) -> bool;
        fn to_le_bytes_vec(self, out: &mut Vec<u8>);
        fn from_le_slice(bytes: &[u8]) -> Self;
    }

    impl Real for f32 {
        const DTYPE: super::DType = super::DType::F32;
        const ZERO: Self = 0.0;
        const ONE: Self = 1.0;

        #[inline]
        fn from_f64(v: f64) -> Self {
            v as f32
        }
        #[inline]
        fn to_f64(self) -> f64 {
            self as f64
        }
        #[inline]
        fn exp(self) -> Self {
            f32::exp(self)
        }
        #[inline]
        fn is_finite(self) -> bool {
            f32::is_finite(self)
        }
        fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
            out.extend_from_slice(&self.to_le_bytes());
        }
        fn from_le_slice(bytes: &[u8]) -> Self {
            f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
        }
    }

    impl Real for f64 {
        const DTYPE: super::DType = super::DType::F64;
        const ZERO: Self = 0.0;
        const ONE: Self = 1.0;

        #[inline]
        fn from_f64(v: f64) -> Self {
            v
        }
        #[inline]
        fn to_f64(self) -> f64 {
            self
        }
        #[inline]
        fn exp(self) -> Self {
            f64::exp(self)
        }
        #[inline]
        fn is_finite(self) -> bool {
            f64::is_finite(self)
        }
        fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
            out.extend_from_slice(&self.to_le_bytes());
        }
        fn from_le_slice(bytes: &[u8]) -> Self {
            f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
        }
    }
}

/// Storage tag written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<R: Real = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            "shape {:?} needs {} elements, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![R::ZERO; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: R) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> R) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<R> {
        ensure!(self.data.len() == 1, "item() on tensor of shape {:?}", self.shape);
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self> {
        ensure!(self.shape == other.shape, "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: R) -> Self {
        self.map(|v| v * s)
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len().max(1) as f64
    }

    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    /// Mean squared difference, accumulated in `f64`.
    pub fn mse_f64(&self, other: &Self) -> Result<f64> {
        ensure!(self.shape == other.shape, "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.to_f64() - b.to_f64();
                d * d
            })
            .sum();
        Ok(s / self.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        ensure!(self.shape == other.shape, "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| S::from_f64(v.to_f64())).collect() }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(!self.shape.is_empty(), "slice_batch on a scalar");
        ensure!(start <= end && end <= self.shape[0], "batch range {start}..{end} out of {}", self.shape[0]);
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * row..end * row].to_vec() })
    }

    /// Stacks equally shaped tensors along a new (or the existing leading) axis.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat_batch of nothing");
        let tail = &parts[0].shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            ensure!(&p.shape[1..] == tail, "concat_batch shape mismatch {:?} vs {:?}", p.shape, parts[0].shape);
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn f32_sum_accumulates_in_double() {
        // 1 + 1e-8 * 1e6 is representable in f64 but lost in naive f32 accumulation.
        let mut data = vec![1e-8f32; 1_000_000];
        data[0] = 1.0;
        let t = Tensor::new(&[data.len()], data).unwrap();
        assert!((t.sum_f64() - 1.01).abs() < 1e-6);
    }

    #[test]
    fn batch_slicing_round_trips() {
        let t = Tensor::<f64>::from_fn(&[4, 2, 3], |i| i as f64);
        let a = t.slice_batch(0, 1).unwrap();
        let b = t.slice_batch(1, 4).unwrap();
        assert_eq!(Tensor::concat_batch(&[a, b]).unwrap(), t);
    }
}
