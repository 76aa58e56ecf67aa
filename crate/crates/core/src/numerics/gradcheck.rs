//! Central finite differences against reverse-mode gradients, in f64.

use super::graph::{grad, Bound, Graph, Var};
use super::params::ParamSet;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` over every
    /// checked scalar; 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

/// Compares [`grad`] with `(L(p + h·e_i) − L(p − h·e_i)) / 2h` for every
/// scalar of every parameter not matched by `frozen`.
pub fn check_gradients(params: &ParamSet<f64>, h: f64, frozen: impl Fn(&str) -> bool, loss: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>) -> Result<GradCheck> {
    ensure!(h > 0.0, "step must be positive");
    let (_, analytic) = grad(params, &frozen, &loss)?;
    let value = |p: &ParamSet<f64>| -> Result<f64> { Ok(grad(p, |_| true, &loss)?.0) };
    let (mut diff, mut na, mut nn, mut checked) = (0.0, 0.0, 0.0, 0);
    let names: Vec<String> = params.names().map(str::to_string).filter(|n| !frozen(n)).collect();
    for name in names {
        let a = analytic.require(&name)?.data().to_vec();
        let mut p = params.clone();
        for (i, &ai) in a.iter().enumerate() {
            let x = p.require(&name)?.data()[i];
            p.get_mut(&name).expect("present").data_mut()[i] = x + h;
            let up = value(&p)?;
            p.get_mut(&name).expect("present").data_mut()[i] = x - h;
            let down = value(&p)?;
            p.get_mut(&name).expect("present").data_mut()[i] = x;
            let ni = (up - down) / (2.0 * h);
            diff += (ai - ni).powi(2);
            na += ai * ai;
            nn += ni * ni;
            checked += 1;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    Ok(GradCheck { rel_error: if denom == 0.0 { diff.sqrt() } else { diff.sqrt() / denom }, analytic_norm: na.sqrt(), checked })
}
