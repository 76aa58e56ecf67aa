//! AdamW with decoupled weight decay, and parameter EMA.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Real, Tensor};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02 }
    }
}

/// First/second moment estimates for one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamWConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: u64,
}

impl OptimState {
    pub fn new<R: Real>(config: AdamWConfig, params: &ParamSet<R>) -> Self {
        let first: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.to_string(), vec![0.0; t.len()])).collect();
        Self { config, second: first.clone(), first, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// One AdamW update of every parameter in `params`.
    ///
    /// `grads` must contain every parameter name.
    pub fn step<R: Real>(&mut self, params: &mut ParamSet<R>, grads: &ParamSet<R>) -> Result<()> {
        for (name, t) in params.iter() {
            let g = grads.get(name);
            ensure!(g.is_some(), "no gradient for trainable parameter `{name}`");
            ensure!(g.unwrap().shape() == t.shape(), "gradient shape {:?} for `{name}` of shape {:?}", g.unwrap().shape(), t.shape());
            ensure!(self.first.get(name).map(Vec::len) == Some(t.len()), "optimizer state does not cover `{name}`");
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = grads.get(&name).expect("checked above");
            let m = self.first.get_mut(&name).expect("checked above");
            let v = self.second.get_mut(&name).expect("checked above");
            let w = params.get_mut(&name).expect("iterating own names");
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.to_f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let updated = wi.to_f64() * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
                *wi = R::from_f64(updated);
            }
        }
        params.step += 1;
        Ok(())
    }
}

/// `shadow' = decay·shadow + (1 − decay)·live`, elementwise.
pub fn ema_update<R: Real>(shadow: &ParamSet<R>, live: &ParamSet<R>, decay: f64) -> Result<ParamSet<R>> {
    ensure!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1), got {decay}");
    ensure!(shadow.same_layout(live), "EMA shadow and live parameters differ in names or shapes");
    let mut out = ParamSet::new();
    for ((name, s), (_, l)) in shadow.iter().zip(live.iter()) {
        let data = s
            .data()
            .iter()
            .zip(l.data())
            .map(|(&a, &b)| R::from_f64(decay * a.to_f64() + (1.0 - decay) * b.to_f64()))
            .collect();
        out.insert(name, Tensor::new(s.shape(), data)?);
    }
    out.step = live.step;
    Ok(out)
}

/// Decay used at optimizer step `step` when warm-up is on: `min(decay, (1+n)/(10+n))`.
pub fn warmed_decay(decay: f64, step: u64) -> f64 {
    let n = step as f64;
    decay.min((1.0 + n) / (10.0 + n))
}
