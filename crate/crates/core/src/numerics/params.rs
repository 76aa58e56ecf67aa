use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Named parameter tensors plus an optimizer step counter.
///
/// Names iterate in lexicographic order, which keeps initialization,
/// serialization and gradient reduction deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<R: Real = f32> {
    tensors: BTreeMap<String, Tensor<R>>,
    pub step: u64,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), step: 0 }
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<R>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<R>> {
        self.get(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<R>) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// The subset whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<R> {
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out.step = self.step;
        out
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), step: self.step }
    }

    pub fn same_layout(&self, other: &ParamSet<R>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Euclidean norm over all tensors (as one flat vector).
    pub fn l2_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sq_norm_f64).sum::<f64>().sqrt()
    }

    /// `self - other`, elementwise, as a new set.
    pub fn difference(&self, other: &ParamSet<R>) -> Result<ParamSet<R>> {
        ensure!(self.same_layout(other), "parameter sets have different layouts");
        let mut out = ParamSet::new();
        for ((k, a), (_, b)) in self.tensors.iter().zip(&other.tensors) {
            out.insert(k.clone(), a.sub(b)?);
        }
        Ok(out)
    }
}
