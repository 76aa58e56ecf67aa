//! Latent consistency flow matching.
//!
//! Source latents `z0 = z + ε` come from the coarse estimator `z = g(E_ω(y))`,
//! targets are `z1 = E(x)`. Points on the straight path
//! `z_t = t·z1 + (1 − (1 − σ_min)t)·z0` are pulled toward the right end of
//! their segment by `f(z_t, t) = z_t + ((i+1)/K − t)·v(z_t, t)`, and the
//! consistency loss compares `f` at `t` and `t + Δt` on the same path. Every
//! loss is a mean over batch and elements.
//!
//! Gradient isolation is structural: the frozen autoencoder and the
//! stop-gradient field copy are bound as graph constants, and the coarse
//! latent is detached before noise is added.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::latent::{arch_from_string, arch_to_string, AutoEncoder};
use crate::nets::Arch;
use crate::numerics::{ema_update, Checkpoint, optim::warmed_decay, AdamWConfig, Bound, Graph, OptimState, ParamSet, Real, Tensor, Var};
use crate::rng::{self, Rng};

/// Which segment end the stop-gradient term at `t + Δt` extrapolates to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentRule {
    /// Both terms use the segment of `t`.
    #[default]
    SegmentOfT,
    /// The second term uses the segment of `t + Δt`.
    OwnSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub delta_t: f64,
    pub alpha: f64,
    pub sigma_min: f64,
    pub sigma_s: f64,
    pub beta: f64,
    pub segment_rule: SegmentRule,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { k: 3, delta_t: 0.05, alpha: 0.001, sigma_min: 1e-5, sigma_s: 0.1, beta: 0.001, segment_rule: SegmentRule::SegmentOfT }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.k < 1 {
            return bad("K", format!("must be at least 1, got {}", self.k));
        }
        if !(self.delta_t > 0.0 && self.delta_t < 1.0) {
            return bad("delta_t", format!("must lie in (0, 1), got {}", self.delta_t));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be >= 0, got {}", self.alpha));
        }
        if !(0.0..0.5).contains(&self.sigma_min) {
            return bad("sigma_min", format!("must lie in [0, 0.5), got {}", self.sigma_min));
        }
        if !(self.sigma_s >= 0.0 && self.sigma_s.is_finite()) {
            return bad("sigma_s", format!("must be >= 0, got {}", self.sigma_s));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", format!("must lie in [0, 1], got {}", self.beta));
        }
        Ok(())
    }

    /// `Δt ≥ 1/K` makes every consistency pair straddle a segment boundary.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.delta_t >= 1.0 / self.k as f64 {
            w.push(format!("delta_t = {} is not below 1/K = {}", self.delta_t, 1.0 / self.k as f64));
        }
        w
    }
}

/// `t·z1 + (1 − (1 − σ_min)t)·z0`.
pub fn trajectory_point<R: Real>(z0: &Tensor<R>, z1: &Tensor<R>, t: f64, sigma_min: f64) -> Result<Tensor<R>> {
    ensure!((0.0..=1.0).contains(&t), "t = {t} is outside [0, 1]");
    let a = R::from_f64(t);
    let b = R::from_f64((1.0 - t) + sigma_min * t);
    z1.zip_map(z0, |p, q| a * p + b * q)
}

/// [`trajectory_point`] with one `t` per batch row.
pub fn trajectory_batch<R: Real>(z0: &Tensor<R>, z1: &Tensor<R>, t: &[f64], sigma_min: f64) -> Result<Tensor<R>> {
    ensure!(z0.shape() == z1.shape(), "trajectory endpoints differ in shape: {:?} vs {:?}", z0.shape(), z1.shape());
    ensure!(z0.rank() >= 1 && z0.shape()[0] == t.len(), "{} times for batch {:?}", t.len(), z0.shape());
    let row = z0.len() / t.len().max(1);
    let mut out = Vec::with_capacity(z0.len());
    for (b, &tb) in t.iter().enumerate() {
        ensure!((0.0..=1.0).contains(&tb), "t = {tb} is outside [0, 1]");
        let (a, c) = (R::from_f64(tb), R::from_f64((1.0 - tb) + sigma_min * tb));
        let s = b * row..(b + 1) * row;
        out.extend(z1.data()[s.clone()].iter().zip(&z0.data()[s]).map(|(&p, &q)| a * p + c * q));
    }
    Tensor::new(z0.shape(), out)
}

/// Straight-path velocity `z1 − (1 − σ_min)·z0`.
pub fn straight_velocity<R: Real>(z0: &Tensor<R>, z1: &Tensor<R>, sigma_min: f64) -> Result<Tensor<R>> {
    let c = R::from_f64(1.0 - sigma_min);
    z1.zip_map(z0, |p, q| p - c * q)
}

/// `min(floor(tK), K − 1)`.
pub fn segment_index(t: f64, k: usize) -> usize {
    ((t * k as f64).floor().max(0.0) as usize).min(k.saturating_sub(1))
}

/// Right end `(i+1)/K` of segment `i`.
pub fn segment_end(i: usize, k: usize) -> f64 {
    (i + 1) as f64 / k as f64
}

/// A time-dependent velocity field evaluated on a graph.
pub trait Field<R: Real> {
    fn velocity(&self, g: &mut Graph<R>, z: Var, t: &[R]) -> Result<Var>;
}

/// A network whose weights are bound on the graph. Binding them as constants
/// gives the stop-gradient copy.
pub struct NetField<'a> {
    pub arch: &'a Arch,
    pub bound: &'a Bound,
}

impl<R: Real> Field<R> for NetField<'_> {
    fn velocity(&self, g: &mut Graph<R>, z: Var, t: &[R]) -> Result<Var> {
        self.arch.forward(g, self.bound, z, Some(t))
    }
}

/// A network that carries its own weights and binds them as constants on
/// whichever graph evaluates it. Use this outside a training graph.
pub struct ParamField<'a, R: Real> {
    pub arch: &'a Arch,
    pub params: &'a ParamSet<R>,
}

impl<R: Real> Field<R> for ParamField<'_, R> {
    fn velocity(&self, g: &mut Graph<R>, z: Var, t: &[R]) -> Result<Var> {
        let b = g.bind(self.params, false);
        self.arch.forward(g, &b, z, Some(t))
    }
}

/// The same velocity for every batch row and time. `c` has the shape of one row.
pub struct ConstantField<R: Real>(pub Tensor<R>);

impl<R: Real> Field<R> for ConstantField<R> {
    fn velocity(&self, g: &mut Graph<R>, z: Var, _t: &[R]) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        ensure!(!shape.is_empty() && shape[1..].iter().product::<usize>() == self.0.len(), "constant field of {} values for batch {:?}", self.0.len(), shape);
        let data: Vec<R> = (0..shape[0]).flat_map(|_| self.0.data().iter().copied()).collect();
        Ok(g.constant(Tensor::new(&shape, data)?))
    }
}

/// A closed-form field; its output is a graph constant.
pub struct FnField<F>(pub F);

impl<R: Real, F: Fn(&Tensor<R>, &[R]) -> Tensor<R>> Field<R> for FnField<F> {
    fn velocity(&self, g: &mut Graph<R>, z: Var, t: &[R]) -> Result<Var> {
        let v = (self.0)(g.value(z), t);
        ensure!(v.shape() == g.shape(z), "field returned {:?} for input {:?}", v.shape(), g.shape(z));
        Ok(g.constant(v))
    }
}

/// Evaluates `field` once outside any training graph.
pub fn eval_field<R: Real>(field: &dyn Field<R>, z: &Tensor<R>, t: &[R]) -> Result<Tensor<R>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let v = field.velocity(&mut g, zv, t)?;
    Ok(g.value(v).clone())
}

fn to_r<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|&x| R::from_f64(x)).collect()
}

/// `z_t + ((i+1)/K − t)·v(z_t, t)` per batch row. Returns `(f, v)`.
pub fn f_map<R: Real>(g: &mut Graph<R>, field: &dyn Field<R>, z_t: Var, t: &[f64], seg: &[usize], k: usize) -> Result<(Var, Var)> {
    ensure!(t.len() == seg.len(), "{} times but {} segment indices", t.len(), seg.len());
    for &i in seg {
        ensure!(i < k, "segment {i} does not exist for K = {k}");
    }
    let v = field.velocity(g, z_t, &to_r(t))?;
    let coef: Vec<R> = t.iter().zip(seg).map(|(&ti, &i)| R::from_f64(segment_end(i, k) - ti)).collect();
    let step = g.scale_rows(v, &coef)?;
    Ok((g.add(z_t, step)?, v))
}

/// [`f_map`] on plain tensors, checking that each `i` is the segment of its `t`.
pub fn f_map_tensor<R: Real>(field: &dyn Field<R>, z_t: &Tensor<R>, t: &[f64], seg: &[usize], k: usize) -> Result<Tensor<R>> {
    for (&ti, &i) in t.iter().zip(seg) {
        ensure!(i == segment_index(ti, k), "segment {i} given for t = {ti}, expected {}", segment_index(ti, k));
    }
    let mut g = Graph::new();
    let z = g.constant(z_t.clone());
    let (f, _) = f_map(&mut g, field, z, t, seg, k)?;
    Ok(g.value(f).clone())
}

/// Handles into the graph built by [`segment_loss`].
#[derive(Debug, Clone)]
pub struct SegmentTerms {
    pub loss: Var,
    /// `f(z_t, t)` through the live field.
    pub f: Var,
    /// Segment of each `t`.
    pub seg: Vec<usize>,
}

/// Multi-segment consistency loss
/// `mean‖f(z_t, t) − f⁻(z_{t+Δt}, t+Δt)‖² + α·mean‖v(z_t, t) − v⁻(z_{t+Δt}, t+Δt)‖²`
/// with both points on the straight path of the same `(z0, z1)` pair.
pub fn segment_loss<R: Real>(g: &mut Graph<R>, live: &dyn Field<R>, target: &dyn Field<R>, z0: &Tensor<R>, z1: &Tensor<R>, t: &[f64], cfg: &FlowConfig) -> Result<SegmentTerms> {
    for &ti in t {
        ensure!(ti >= 0.0 && ti + cfg.delta_t <= 1.0 + 1e-12, "t = {ti} leaves no room for Δt = {}", cfg.delta_t);
    }
    let t2: Vec<f64> = t.iter().map(|&ti| (ti + cfg.delta_t).min(1.0)).collect();
    let zt = g.constant(trajectory_batch(z0, z1, t, cfg.sigma_min)?);
    let zt2 = g.constant(trajectory_batch(z0, z1, &t2, cfg.sigma_min)?);
    let seg: Vec<usize> = t.iter().map(|&ti| segment_index(ti, cfg.k)).collect();
    let seg2: Vec<usize> = match cfg.segment_rule {
        SegmentRule::SegmentOfT => seg.clone(),
        SegmentRule::OwnSegment => t2.iter().map(|&ti| segment_index(ti, cfg.k)).collect(),
    };
    let (f1, v1) = f_map(g, live, zt, t, &seg, cfg.k)?;
    let (f2, v2) = f_map(g, target, zt2, &t2, &seg2, cfg.k)?;
    let f2 = g.detach(f2);
    let v2 = g.detach(v2);
    let df = g.mse(f1, f2)?;
    let loss = if cfg.alpha > 0.0 {
        let dv = g.mse(v1, v2)?;
        let dv = g.scale(dv, R::from_f64(cfg.alpha))?;
        g.add(df, dv)?
    } else {
        df
    };
    Ok(SegmentTerms { loss, f: f1, seg })
}

/// The single-segment form `f(z, t) = z + (1 − t)·v(z, t)`, written out directly.
#[allow(clippy::too_many_arguments)]
pub fn global_consistency_loss<R: Real>(g: &mut Graph<R>, live: &dyn Field<R>, target: &dyn Field<R>, z0: &Tensor<R>, z1: &Tensor<R>, t: &[f64], delta_t: f64, alpha: f64, sigma_min: f64) -> Result<Var> {
    let t2: Vec<f64> = t.iter().map(|&ti| ti + delta_t).collect();
    let zt = g.constant(trajectory_batch(z0, z1, t, sigma_min)?);
    let zt2 = g.constant(trajectory_batch(z0, z1, &t2, sigma_min)?);
    let v1 = live.velocity(g, zt, &to_r(t))?;
    let c1: Vec<R> = t.iter().map(|&ti| R::from_f64(1.0 - ti)).collect();
    let s1 = g.scale_rows(v1, &c1)?;
    let f1 = g.add(zt, s1)?;
    let v2 = target.velocity(g, zt2, &to_r(&t2))?;
    let v2 = g.detach(v2);
    let c2: Vec<R> = t2.iter().map(|&ti| R::from_f64(1.0 - ti)).collect();
    let s2 = g.scale_rows(v2, &c2)?;
    let f2 = g.add(zt2, s2)?;
    let df = g.mse(f1, f2)?;
    let dv = g.mse(v1, v2)?;
    let dv = g.scale(dv, R::from_f64(alpha))?;
    g.add(df, dv)
}

/// `ẑ1 = f + (1 − (i+1)/K)·v(f, (i+1)/K)`.
pub fn continue_to_one<R: Real>(g: &mut Graph<R>, field: &dyn Field<R>, f: Var, seg: &[usize], k: usize) -> Result<Var> {
    let ends: Vec<f64> = seg.iter().map(|&i| segment_end(i, k)).collect();
    if ends.iter().all(|&e| e >= 1.0) {
        return Ok(f);
    }
    let v = field.velocity(g, f, &to_r(&ends))?;
    let coef: Vec<R> = ends.iter().map(|&e| R::from_f64(1.0 - e)).collect();
    let step = g.scale_rows(v, &coef)?;
    g.add(f, step)
}

/// The trainable LQ encoder `E_ω` followed by the coarse estimator `g_φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEstimator {
    pub enc_arch: Arch,
    /// `ω`, initialized from the frozen encoder.
    pub enc: ParamSet<f32>,
    pub g_arch: Arch,
    /// `φ`.
    pub g: ParamSet<f32>,
}

impl CoarseEstimator {
    pub fn from_encoder(ae: &AutoEncoder, g_arch: Arch, rng: &mut Rng) -> Self {
        let mut enc = ae.enc.clone();
        enc.step = 0;
        Self { enc_arch: ae.enc_arch.clone(), enc, g_arch: g_arch.clone(), g: g_arch.init(rng) }
    }

    /// `g(E_ω(y))` on the graph.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, be: &Bound, bg: &Bound, y: Var) -> Result<Var> {
        let h = self.enc_arch.forward(g, be, y, None)?;
        self.g_arch.forward(g, bg, h, None)
    }

    pub fn apply(&self, y: &Tensor<f32>) -> Result<Tensor<f32>> {
        let h = self.enc_arch.apply(&self.enc, y, None)?;
        self.g_arch.apply(&self.g, &h, None)
    }
}

/// `mean‖g(E_ω(y)) − z1‖²`. Returns `(loss, z)`.
pub fn l2_coarse_loss<R: Real>(g: &mut Graph<R>, ce: &CoarseEstimator, be: &Bound, bg: &Bound, y: Var, z1: Var) -> Result<(Var, Var)> {
    let z = ce.forward(g, be, bg, y)?;
    Ok((g.mse(z, z1)?, z))
}

/// `(1 − β)·L_LCFM + β·L_MSE`.
pub fn dp_combine<R: Real>(g: &mut Graph<R>, lcfm: Var, mse: Var, beta: f64) -> Result<Var> {
    let a = g.scale(lcfm, R::from_f64(1.0 - beta))?;
    let b = g.scale(mse, R::from_f64(beta))?;
    g.add(a, b)
}

/// Handles into the graph built by [`dp_loss`].
#[derive(Debug, Clone, Copy)]
pub struct DpTerms {
    pub lcfm: Var,
    pub mse: Var,
    pub dp: Var,
}

/// `L_DP` for sources `z0`, targets `z1` and HQ batch `x`, decoding through the
/// frozen decoder bound as `dec`.
#[allow(clippy::too_many_arguments)]
pub fn dp_loss<R: Real>(g: &mut Graph<R>, live: &dyn Field<R>, target: &dyn Field<R>, dec_arch: &Arch, dec: &Bound, z0: &Tensor<R>, z1: &Tensor<R>, x: Var, t: &[f64], cfg: &FlowConfig) -> Result<DpTerms> {
    let seg = segment_loss(g, live, target, z0, z1, t, cfg)?;
    let z_hat = continue_to_one(g, live, seg.f, &seg.seg, cfg.k)?;
    let x_hat = dec_arch.forward(g, dec, z_hat, None)?;
    let mse = g.mse(x_hat, x)?;
    let dp = dp_combine(g, seg.loss, mse, cfg.beta)?;
    Ok(DpTerms { lcfm: seg.loss, mse, dp })
}

/// Straight-path regression `mean‖v(z_t, t) − (z1 − (1 − σ_min)z0)‖²`, the
/// objective of the flow-matching baseline.
pub fn flow_matching_loss<R: Real>(g: &mut Graph<R>, field: &dyn Field<R>, z0: &Tensor<R>, z1: &Tensor<R>, t: &[f64], sigma_min: f64) -> Result<Var> {
    let zt = g.constant(trajectory_batch(z0, z1, t, sigma_min)?);
    let target = g.constant(straight_velocity(z0, z1, sigma_min)?);
    let v = field.velocity(g, zt, &to_r(t))?;
    g.mse(v, target)
}

/// What the field is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `L_DP`: consistency plus decoded MSE.
    #[default]
    Lcfm,
    /// Plain flow-matching regression, no consistency and no MSE term.
    FlowMatching,
}

/// Where the flow starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// `g(E_ω(y))`, trained with `L₂`.
    #[default]
    Coarse,
    /// `E(y)` through the frozen encoder; no coarse estimator.
    FrozenEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub flow: FlowConfig,
    pub objective: Objective,
    pub source: Source,
    pub optim: AdamWConfig,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { flow: FlowConfig::default(), objective: Objective::Lcfm, source: Source::Coarse, optim: AdamWConfig::default(), ema_decay: 0.999 }
    }
}

/// Per-step loss values. `total = l2 + dp`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l2: f64,
    pub lcfm: f64,
    pub mse: f64,
    pub dp: f64,
    pub total: f64,
}

/// Everything a restoration needs besides the frozen autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub coarse: Option<CoarseEstimator>,
    pub field_arch: Arch,
    pub theta: ParamSet<f32>,
    pub theta_ema: ParamSet<f32>,
    pub flow: FlowConfig,
}

impl FlowModel {
    pub fn new(ae: &AutoEncoder, source: Source, g_arch: Arch, field_arch: Arch, flow: FlowConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "lcfm/init");
        let coarse = match source {
            Source::Coarse => Some(CoarseEstimator::from_encoder(ae, g_arch, &mut r)),
            Source::FrozenEncoder => None,
        };
        let theta = field_arch.init(&mut r);
        Self { coarse, field_arch, theta_ema: theta.clone(), theta, flow }
    }

    /// Noise-free source latent: `g(E_ω(y))`, or `E(y)` without a coarse estimator.
    pub fn source_latent(&self, ae: &AutoEncoder, y: &Tensor<f32>) -> Result<Tensor<f32>> {
        match &self.coarse {
            Some(ce) => ce.apply(y),
            None => ae.encode(y),
        }
    }
}

impl FlowModel {
    /// Live and EMA field weights plus the coarse estimator in one container.
    pub fn to_checkpoint(&self, steps: u64) -> Result<Checkpoint<f32>> {
        let mut p = ParamSet::new();
        p.extend_prefixed("theta.", &self.theta);
        p.extend_prefixed("theta_ema.", &self.theta_ema);
        p.step = steps;
        let flow = toml::to_string(&self.flow).map_err(|e| Error::Format(format!("cannot serialize flow config: {e}")))?;
        let mut ck = Checkpoint::new(ParamSet::new()).with_meta("kind", "flow").with_meta("field", arch_to_string(&self.field_arch)?).with_meta("flow", flow);
        if let Some(c) = &self.coarse {
            p.extend_prefixed("coarse.enc.", &c.enc);
            p.extend_prefixed("coarse.g.", &c.g);
            ck = ck.with_meta("coarse_encoder", arch_to_string(&c.enc_arch)?).with_meta("coarse_g", arch_to_string(&c.g_arch)?);
        }
        ck.params = p;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        let get = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Format(format!("flow checkpoint has no `{k}` record")));
        if get("kind")? != "flow" {
            return Err(Error::Format(format!("expected a flow checkpoint, found `{}`", get("kind")?)));
        }
        let flow: FlowConfig = toml::from_str(get("flow")?).map_err(|e| Error::Format(format!("bad flow record: {e}")))?;
        let coarse = match (ck.meta.get("coarse_encoder"), ck.meta.get("coarse_g")) {
            (Some(e), Some(g)) => Some(CoarseEstimator {
                enc_arch: arch_from_string(e)?,
                enc: ck.params.strip_prefix("coarse.enc."),
                g_arch: arch_from_string(g)?,
                g: ck.params.strip_prefix("coarse.g."),
            }),
            _ => None,
        };
        let theta = ck.params.strip_prefix("theta.");
        let theta_ema = ck.params.strip_prefix("theta_ema.");
        ensure!(!theta.is_empty() && theta.same_layout(&theta_ema), "flow checkpoint is missing live or EMA field weights");
        Ok(Self { coarse, field_arch: arch_from_string(get("field")?)?, theta, theta_ema, flow })
    }
}

/// Owns the optimizer state for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: FlowModel,
    opt_enc: Option<OptimState>,
    opt_g: Option<OptimState>,
    opt_theta: OptimState,
    rng: Rng,
    steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: FlowModel, seed: u64) -> Result<Self> {
        cfg.flow.validate()?;
        ensure!((0.0..1.0).contains(&cfg.ema_decay), "EMA decay must lie in [0, 1), got {}", cfg.ema_decay);
        let opt_enc = model.coarse.as_ref().map(|c| OptimState::new(cfg.optim, &c.enc));
        let opt_g = model.coarse.as_ref().map(|c| OptimState::new(cfg.optim, &c.g));
        let opt_theta = OptimState::new(cfg.optim, &model.theta);
        Ok(Self { cfg, model, opt_enc, opt_g, opt_theta, rng: rng::stream(seed, "lcfm/train"), steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One joint step: AdamW on `(ω, φ)` from `L₂`, AdamW on `θ` from `L_DP`
    /// (or the flow-matching loss), then the EMA update of `θ`.
    pub fn step(&mut self, ae: &AutoEncoder, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<LossReport> {
        let n = x.shape()[0];
        let flow = self.cfg.flow;
        let z1t = ae.encode(x)?;
        let mut g = Graph::<f32>::new();
        let z1 = g.constant(z1t.clone());
        let yv = g.constant(y.clone());
        let xv = g.constant(x.clone());

        let coarse = self.model.coarse.as_ref();
        let bound_coarse = coarse.map(|c| (g.bind(&c.enc, true), g.bind(&c.g, true)));
        let (l2, z_src) = match (coarse, &bound_coarse) {
            (Some(c), Some((be, bg))) => {
                let (l, z) = l2_coarse_loss(&mut g, c, be, bg, yv, z1)?;
                (Some(l), g.value(z).clone())
            }
            _ => (None, ae.encode(y)?),
        };
        // ε is drawn fresh every step.
        let eps = rng::normals(&mut self.rng, z_src.len(), flow.sigma_s);
        let z0 = Tensor::new(z_src.shape(), z_src.data().iter().zip(&eps).map(|(&a, &e)| a + e as f32).collect())?;

        let bt = g.bind(&self.model.theta, true);
        let bt_minus = g.bind(&self.model.theta, false);
        let bd = g.bind(&ae.dec, false);
        let live = NetField { arch: &self.model.field_arch, bound: &bt };
        let target = NetField { arch: &self.model.field_arch, bound: &bt_minus };

        let mut report = LossReport::default();
        let field_loss = match self.cfg.objective {
            Objective::Lcfm => {
                let hi = 1.0 - flow.delta_t;
                let t: Vec<f64> = (0..n).map(|_| hi * self.rng.random::<f64>()).collect();
                let terms = dp_loss(&mut g, &live, &target, &ae.dec_arch, &bd, &z0, &z1t, xv, &t, &flow)?;
                report.lcfm = g.value(terms.lcfm).data()[0] as f64;
                report.mse = g.value(terms.mse).data()[0] as f64;
                terms.dp
            }
            Objective::FlowMatching => {
                let t: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>()).collect();
                let l = flow_matching_loss(&mut g, &live, &z0, &z1t, &t, flow.sigma_min)?;
                report.lcfm = g.value(l).data()[0] as f64;
                l
            }
        };
        report.dp = g.value(field_loss).data()[0] as f64;
        let total = match l2 {
            Some(l) => {
                report.l2 = g.value(l).data()[0] as f64;
                g.add(l, field_loss)?
            }
            None => field_loss,
        };
        report.total = g.value(total).data()[0] as f64;
        if !report.total.is_finite() {
            return Err(Error::numeric(format!("training loss is {} at step {} (L2 {}, LCFM {}, MSE {})", report.total, self.steps, report.l2, report.lcfm, report.mse)));
        }
        let grads = g.backward(total)?;

        if let (Some(c), Some((be, bg))) = (self.model.coarse.as_mut(), &bound_coarse) {
            self.opt_enc.as_mut().expect("coarse optimizer").step(&mut c.enc, &be.gradients(&g, &grads))?;
            self.opt_g.as_mut().expect("coarse optimizer").step(&mut c.g, &bg.gradients(&g, &grads))?;
        }
        self.opt_theta.step(&mut self.model.theta, &bt.gradients(&g, &grads))?;
        let decay = warmed_decay(self.cfg.ema_decay, self.steps);
        self.model.theta_ema = ema_update(&self.model.theta_ema, &self.model.theta, decay)?;
        self.steps += 1;
        Ok(report)
    }
}
