//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] records every primitive applied during the forward pass.
//! Nodes created with [`Graph::constant`] or [`Graph::detach`] never receive
//! gradient, and neither does anything computed only from them.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{ParamSet, Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<R: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    ScaleRows(Var, Vec<R>),
    AddBias(Var, Var),
    Silu(Var),
    Square(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Option<Vec<R>> },
    Upsample(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    check_finite: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    /// NaN screening is on in debug builds and off in release builds.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::numeric(format!("non-finite value produced by {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Identity in the forward pass, zero in the backward pass.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Registers every tensor of `params` as a leaf. With `trainable = false`
    /// the parameters are inserted as constants (the stop-gradient copy).
    pub fn bind(&mut self, params: &ParamSet<R>, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { self.leaf(t.clone()) } else { self.constant(t.clone()) };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), self.ng(&[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), self.ng(&[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), self.ng(&[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), self.ng(&[a]))
    }

    /// Multiplies batch row `i` (leading axis) by the constant `coef[i]`.
    pub fn scale_rows(&mut self, a: Var, coef: &[R]) -> Result<Var> {
        let x = self.value(a);
        ensure!(x.rank() >= 1 && x.shape()[0] == coef.len(), "scale_rows: {} coefficients for shape {:?}", coef.len(), x.shape());
        let row = x.len() / coef.len().max(1);
        let mut out = x.clone();
        for (chunk, &c) in out.data_mut().chunks_mut(row.max(1)).zip(coef) {
            chunk.iter_mut().for_each(|v| *v = *v * c);
        }
        self.push(out, Op::ScaleRows(a, coef.to_vec()), self.ng(&[a]))
    }

    /// Adds `b[c]` along axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        ensure!(xs.rank() >= 2 && bs.rank() == 1 && bs.len() == xs.shape()[1], "add_bias: x {:?} with bias {:?}", xs.shape(), bs.shape());
        let c = xs.shape()[1];
        let inner: usize = xs.shape()[2..].iter().product();
        let mut out = xs.clone();
        let bias = bs.data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push(out, Op::AddBias(x, b), self.ng(&[x, b]))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), self.ng(&[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), self.ng(&[a]))
    }

    /// `(n, k) · (k, m)`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        ensure!(av.rank() == 2 && wv.rank() == 2 && av.shape()[1] == wv.shape()[0], "matmul: {:?} x {:?}", av.shape(), wv.shape());
        let (n, k, m) = (av.shape()[0], av.shape()[1], wv.shape()[1]);
        let out = Tensor::new(&[n, m], kernels::matmul(av.data(), wv.data(), n, k, m))?;
        self.push(out, Op::Matmul(a, w), self.ng(&[a, w]))
    }

    /// Cross-correlation of `x (n, c_in, h, w)` with `w (c_out, c_in, kh, kw)`,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        ensure!(xv.rank() == 4 && wv.rank() == 4, "conv2d: input {:?}, kernel {:?}", xv.shape(), wv.shape());
        ensure!(xv.shape()[1] == wv.shape()[1], "conv2d: {} input channels, kernel expects {}", xv.shape()[1], wv.shape()[1]);
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad)
            .ok_or_else(|| Error::contract(format!("conv2d: kernel {:?} does not fit input {:?}", wv.shape(), xv.shape())))?;
        let c_out = wv.shape()[0];
        let cols = kernels::im2col(xv.data(), &geom);
        let out_cm = kernels::matmul(wv.data(), &cols, c_out, geom.rows(), geom.cols());
        let plane = geom.h_out * geom.w_out;
        let out = kernels::channel_major_to_batch(&out_cm, geom.n, c_out, plane);
        let out = Tensor::new(&[geom.n, c_out, geom.h_out, geom.w_out], out)?;
        let needs = self.ng(&[x, w]);
        // Patches are only needed again for the kernel gradient.
        let keep = if self.nodes[w.0].needs_grad { Some(cols) } else { None };
        self.push(out, Op::Conv2d { x, w, geom, cols: keep }, needs)
    }

    /// Nearest-neighbour enlargement of the two trailing axes by `factor`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.rank() == 4 && factor >= 1, "upsample: shape {:?}, factor {factor}", xv.shape());
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (ho, wo) = (h * factor, w * factor);
        let src = xv.data();
        let mut out = vec![R::ZERO; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = src[p * h * w + (y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(out, Op::Upsample(x, factor), self.ng(&[x]))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        ensure!(first.len() >= 2, "concat needs rank >= 2, got {:?}", first);
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            ensure!(s.len() == first.len() && s[0] == n && s[2..] == first[2..], "concat: {:?} vs {:?}", s, first);
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[b * wd * inner..(b + 1) * wd * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Concat(parts.to_vec()), self.ng(parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), self.ng(&[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(R::from_f64(s)), Op::Sum(x), self.ng(&[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean_f64();
        self.push(Tensor::scalar(R::from_f64(s)), Op::Mean(x), self.ng(&[x]))
    }

    /// `mean((a - b)²)` over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<R>> {
        let lv = self.value(loss);
        ensure!(lv.len() == 1, "backward from non-scalar node of shape {:?}", lv.shape());
        if !lv.data()[0].is_finite() {
            return Err(Error::numeric(format!("loss is {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), R::ONE));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || Ok(gout.clone()))?;
                    self.acc(&mut grads, *b, || Ok(gout.clone()))?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || Ok(gout.clone()))?;
                    self.acc(&mut grads, *b, || Ok(gout.scale(-R::ONE)))?;
                }
                Op::Mul(a, b) => {
                    self.acc(&mut grads, *a, || gout.zip_map(self.value(*b), |g, y| g * y))?;
                    self.acc(&mut grads, *b, || gout.zip_map(self.value(*a), |g, x| g * x))?;
                }
                Op::Scale(a, s) => self.acc(&mut grads, *a, || Ok(gout.scale(*s)))?,
                Op::ScaleRows(a, coef) => self.acc(&mut grads, *a, || {
                    let row = gout.len() / coef.len().max(1);
                    let mut g = gout.clone();
                    for (chunk, &c) in g.data_mut().chunks_mut(row.max(1)).zip(coef) {
                        chunk.iter_mut().for_each(|v| *v = *v * c);
                    }
                    Ok(g)
                })?,
                Op::AddBias(x, b) => {
                    self.acc(&mut grads, *x, || Ok(gout.clone()))?;
                    self.acc(&mut grads, *b, || {
                        let c = self.value(*b).len();
                        let inner: usize = gout.shape()[2..].iter().product();
                        let mut acc = vec![0f64; c];
                        for (k, chunk) in gout.data().chunks(inner).enumerate() {
                            acc[k % c] += chunk.iter().map(|v| v.to_f64()).sum::<f64>();
                        }
                        Tensor::new(&[c], acc.into_iter().map(R::from_f64).collect())
                    })?;
                }
                Op::Silu(a) => self.acc(&mut grads, *a, || {
                    gout.zip_map(self.value(*a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (R::ONE + x * (R::ONE - s))
                    })
                })?,
                Op::Square(a) => {
                    self.acc(&mut grads, *a, || gout.zip_map(self.value(*a), |g, x| g * x * R::from_f64(2.0)))?
                }
                Op::Matmul(a, w) => {
                    let (av, wv) = (self.value(*a), self.value(*w));
                    let (n, k, m) = (av.shape()[0], av.shape()[1], wv.shape()[1]);
                    self.acc(&mut grads, *a, || Tensor::new(&[n, k], kernels::matmul_bt(gout.data(), wv.data(), n, m, k)))?;
                    self.acc(&mut grads, *w, || Tensor::new(&[k, m], kernels::matmul_at(av.data(), gout.data(), k, n, m)))?;
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let wv = self.value(*w);
                    let c_out = wv.shape()[0];
                    let plane = geom.h_out * geom.w_out;
                    let g_cm = kernels::batch_to_channel_major(gout.data(), geom.n, c_out, plane);
                    self.acc(&mut grads, *w, || {
                        let cols = cols.as_ref().ok_or_else(|| Error::contract("conv2d patches were not retained"))?;
                        Tensor::new(wv.shape(), kernels::matmul_bt(&g_cm, cols, c_out, geom.cols(), geom.rows()))
                    })?;
                    self.acc(&mut grads, *x, || {
                        let dcols = kernels::matmul_at(wv.data(), &g_cm, geom.rows(), c_out, geom.cols());
                        Tensor::new(self.value(*x).shape(), kernels::col2im(&dcols, geom))
                    })?;
                }
                Op::Upsample(x, factor) => self.acc(&mut grads, *x, || {
                    let s = self.value(*x).shape();
                    let (h, w) = (s[2], s[3]);
                    let (ho, wo) = (h * factor, w * factor);
                    let mut out = vec![R::ZERO; s.iter().product()];
                    for p in 0..s[0] * s[1] {
                        for y in 0..ho {
                            for xx in 0..wo {
                                out[p * h * w + (y / factor) * w + xx / factor] += gout.data()[p * ho * wo + y * wo + xx];
                            }
                        }
                    }
                    Tensor::new(s, out)
                })?,
                Op::Concat(parts) => {
                    let n = gout.shape()[0];
                    let inner: usize = gout.shape()[2..].iter().product();
                    let total = gout.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let wd = self.value(p).shape()[1];
                        let off = offset;
                        self.acc(&mut grads, p, || {
                            let mut out = Vec::with_capacity(n * wd * inner);
                            for b in 0..n {
                                let start = (b * total + off) * inner;
                                out.extend_from_slice(&gout.data()[start..start + wd * inner]);
                            }
                            Tensor::new(self.value(p).shape(), out)
                        })?;
                        offset += wd;
                    }
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, || gout.clone().reshape(self.value(*x).shape()))?,
                Op::Sum(x) => {
                    let g = gout.data()[0];
                    self.acc(&mut grads, *x, || Ok(Tensor::full(self.value(*x).shape(), g)))?
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len().max(1);
                    let g = R::from_f64(gout.data()[0].to_f64() / n as f64);
                    self.acc(&mut grads, *x, || Ok(Tensor::full(self.value(*x).shape(), g)))?
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<R>>], target: Var, f: impl FnOnce() -> Result<Tensor<R>>) -> Result<()> {
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        let g = f()?;
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *v;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

fn op_name<R: Real>(op: &Op<R>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::ScaleRows(..) => "scale_rows",
        Op::AddBias(..) => "add_bias",
        Op::Silu(..) => "silu",
        Op::Square(..) => "square",
        Op::Matmul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Upsample(..) => "upsample",
        Op::Concat(..) => "concat",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
    }
}

/// Result of [`Graph::backward`].
pub struct Grads<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Grads<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Parameter name → graph handle, produced by [`Graph::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// The handles whose names start with `prefix`, renamed without it.
    pub fn strip_prefix(&self, prefix: &str) -> Bound {
        Bound { vars: self.vars.iter().filter_map(|(k, &v)| k.strip_prefix(prefix).map(|r| (r.to_string(), v))).collect() }
    }

    /// Gradient for every bound parameter; parameters with no gradient path get zeros.
    pub fn gradients<R: Real>(&self, graph: &Graph<R>, grads: &Grads<R>) -> ParamSet<R> {
        let mut out = ParamSet::new();
        for (name, &v) in &self.vars {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
            out.insert(name, g);
        }
        out
    }
}

/// Gradient of a scalar loss with respect to every tensor in `params`.
///
/// `frozen` names parameters that enter the loss through a stop-gradient;
/// their returned gradient is exactly zero.
pub fn grad<R: Real>(
    params: &ParamSet<R>,
    frozen: impl Fn(&str) -> bool,
    loss_fn: impl FnOnce(&mut Graph<R>, &Bound) -> Result<Var>,
) -> Result<(f64, ParamSet<R>)> {
    let mut g = Graph::new();
    let mut vars = BTreeMap::new();
    for (name, t) in params.iter() {
        let v = if frozen(name) { g.constant(t.clone()) } else { g.leaf(t.clone()) };
        vars.insert(name.to_string(), v);
    }
    let bound = Bound { vars };
    let loss = loss_fn(&mut g, &bound)?;
    let value = g.value(loss);
    ensure!(value.len() == 1, "loss must be scalar, got shape {:?}", value.shape());
    let value = value.data()[0].to_f64();
    let grads = g.backward(loss)?;
    Ok((value, bound.gradients(&g, &grads)))
}
