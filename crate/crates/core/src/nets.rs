//! Parameterized architectures, evaluated on a [`Graph`].
//!
//! An [`Arch`] owns no weights: [`Arch::init`] produces a [`ParamSet`] and
//! [`Arch::forward`] reads the weights through a [`Bound`]. Binding the same
//! weights as constants gives the stop-gradient copy.
//!
//! Convolution layer `p` is stored either plainly (`p.w`, `p.b`) or as a
//! collapsible pair: a 3×3 expansion (`p.w3`, `p.b3`) followed by a 1×1
//! projection (`p.w1`, `p.b1`) with nothing in between. [`collapse_params`]
//! folds every pair into the plain form.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{Bound, Graph, ParamSet, Real, Tensor, Var};
use crate::rng::Rng;

/// Residual branches of the coarse estimator are scaled by this before being added.
const RDB_SCALE: f64 = 0.2;
/// Output layers that should start near zero are drawn at this fraction of the usual scale.
const SMALL_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Arch {
    Identity,
    /// Two stride-2 3×3 convolutions with a SiLU between them.
    ConvEncoder { in_ch: usize, hidden: usize, latent_ch: usize },
    /// Mirror of [`Arch::ConvEncoder`] using nearest 2× upsampling.
    ConvDecoder { latent_ch: usize, hidden: usize, out_ch: usize },
    /// Dense layers over the flattened input, SiLU between layers. With
    /// `time`, `t` is appended as an extra input feature.
    Mlp { dims: Vec<usize>, time: bool },
    /// Residual dense blocks with a cascade skip and an input residual.
    Rrdb { ch: usize, width: usize, growth: usize, blocks: usize },
    /// Three-level encoder-decoder with skips; `t` enters as a constant channel.
    /// `expand > 1` stores every 3×3 layer as a collapsible pair.
    UNet { ch: usize, widths: [usize; 3], expand: usize },
}

impl Arch {
    pub fn takes_time(&self) -> bool {
        matches!(self, Arch::UNet { .. } | Arch::Mlp { time: true, .. })
    }

    /// Fresh weights: uniform in `±1/√fan_in`, zero biases.
    pub fn init(&self, rng: &mut Rng) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        match self {
            Arch::Identity => {}
            Arch::ConvEncoder { in_ch, hidden, latent_ch } => {
                conv_init(&mut p, rng, "conv1", *in_ch, *hidden, 3, 1, 1.0);
                conv_init(&mut p, rng, "conv2", *hidden, *latent_ch, 3, 1, 1.0);
            }
            Arch::ConvDecoder { latent_ch, hidden, out_ch } => {
                conv_init(&mut p, rng, "conv1", *latent_ch, *hidden, 3, 1, 1.0);
                conv_init(&mut p, rng, "conv2", *hidden, *out_ch, 3, 1, 1.0);
            }
            Arch::Mlp { dims, time } => {
                for (i, pair) in dims.windows(2).enumerate() {
                    let fan_in = pair[0] + usize::from(*time && i == 0);
                    dense_init(&mut p, rng, &format!("fc{i}"), fan_in, pair[1]);
                }
            }
            Arch::Rrdb { ch, width, growth, blocks } => {
                conv_init(&mut p, rng, "conv_in", *ch, *width, 3, 1, 1.0);
                for k in 0..*blocks {
                    conv_init(&mut p, rng, &format!("rdb{k}.c1"), *width, *growth, 3, 1, 1.0);
                    conv_init(&mut p, rng, &format!("rdb{k}.c2"), width + growth, *growth, 3, 1, 1.0);
                    conv_init(&mut p, rng, &format!("rdb{k}.fuse"), width + 2 * growth, *width, 1, 1, 1.0);
                }
                conv_init(&mut p, rng, "conv_out", *width, *ch, 3, 1, SMALL_INIT);
            }
            Arch::UNet { ch, widths: [w0, w1, w2], expand } => {
                let e = *expand;
                conv_init(&mut p, rng, "in", ch + 1, *w0, 3, e, 1.0);
                conv_init(&mut p, rng, "down1", *w0, *w1, 3, e, 1.0);
                conv_init(&mut p, rng, "down2", *w1, *w2, 3, e, 1.0);
                conv_init(&mut p, rng, "mid", *w2, *w2, 3, e, 1.0);
                conv_init(&mut p, rng, "up1", w2 + w1, *w1, 3, e, 1.0);
                conv_init(&mut p, rng, "up0", w1 + w0, *w0, 3, e, 1.0);
                conv_init(&mut p, rng, "out", *w0, *ch, 3, 1, SMALL_INIT);
            }
        }
        p
    }

    /// Evaluates the network on a batch. `t` holds one time per batch row and
    /// is required exactly when [`Arch::takes_time`].
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, b: &Bound, x: Var, t: Option<&[R]>) -> Result<Var> {
        ensure!(t.is_some() == self.takes_time(), "time input {} for {:?}", if t.is_some() { "given" } else { "missing" }, self.kind());
        let shape = g.shape(x).to_vec();
        ensure!(shape.len() == 4, "networks take (N, C, H, W) batches, got {:?}", shape);
        let n = shape[0];
        match self {
            Arch::Identity => Ok(x),
            Arch::ConvEncoder { .. } => {
                let h = conv(g, b, "conv1", x, 2, 1)?;
                let h = g.silu(h)?;
                conv(g, b, "conv2", h, 2, 1)
            }
            Arch::ConvDecoder { .. } => {
                let h = g.upsample(x, 2)?;
                let h = conv(g, b, "conv1", h, 1, 1)?;
                let h = g.silu(h)?;
                let h = g.upsample(h, 2)?;
                conv(g, b, "conv2", h, 1, 1)
            }
            Arch::Mlp { dims, .. } => {
                let d: usize = shape[1..].iter().product();
                ensure!(dims.first() == Some(&d), "mlp expects {} input features, got {d}", dims.first().copied().unwrap_or(0));
                let mut h = g.reshape(x, &[n, d])?;
                if let Some(t) = t {
                    let tc = g.constant(Tensor::new(&[n, 1], t.to_vec())?);
                    h = g.concat(&[h, tc])?;
                }
                let layers = dims.len() - 1;
                for i in 0..layers {
                    h = dense(g, b, &format!("fc{i}"), h)?;
                    if i + 1 < layers {
                        h = g.silu(h)?;
                    }
                }
                let out = *dims.last().unwrap_or(&d);
                if out == d {
                    g.reshape(h, &shape)
                } else {
                    g.reshape(h, &[n, out, 1, 1])
                }
            }
            Arch::Rrdb { blocks, .. } => {
                let h0 = conv(g, b, "conv_in", x, 1, 1)?;
                let mut h = h0;
                for k in 0..*blocks {
                    let c1 = conv(g, b, &format!("rdb{k}.c1"), h, 1, 1)?;
                    let c1 = g.silu(c1)?;
                    let cat1 = g.concat(&[h, c1])?;
                    let c2 = conv(g, b, &format!("rdb{k}.c2"), cat1, 1, 1)?;
                    let c2 = g.silu(c2)?;
                    let cat2 = g.concat(&[h, c1, c2])?;
                    let fuse = conv(g, b, &format!("rdb{k}.fuse"), cat2, 1, 0)?;
                    let fuse = g.scale(fuse, R::from_f64(RDB_SCALE))?;
                    h = g.add(h, fuse)?;
                }
                let h = g.add(h, h0)?;
                let out = conv(g, b, "conv_out", h, 1, 1)?;
                g.add(x, out)
            }
            Arch::UNet { .. } => {
                let t = t.unwrap_or_default();
                let plane = shape[2] * shape[3];
                let tmap: Vec<R> = t.iter().flat_map(|&ti| std::iter::repeat_n(ti, plane)).collect();
                let tc = g.constant(Tensor::new(&[n, 1, shape[2], shape[3]], tmap)?);
                let inp = g.concat(&[x, tc])?;
                let e0 = conv(g, b, "in", inp, 1, 1)?;
                let e0 = g.silu(e0)?;
                let e1 = conv(g, b, "down1", e0, 2, 1)?;
                let e1 = g.silu(e1)?;
                let e2 = conv(g, b, "down2", e1, 2, 1)?;
                let e2 = g.silu(e2)?;
                let m = conv(g, b, "mid", e2, 1, 1)?;
                let m = g.silu(m)?;
                let u1 = g.upsample(m, 2)?;
                let u1 = g.concat(&[u1, e1])?;
                let u1 = conv(g, b, "up1", u1, 1, 1)?;
                let u1 = g.silu(u1)?;
                let u0 = g.upsample(u1, 2)?;
                let u0 = g.concat(&[u0, e0])?;
                let u0 = conv(g, b, "up0", u0, 1, 1)?;
                let u0 = g.silu(u0)?;
                conv(g, b, "out", u0, 1, 1)
            }
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Arch::Identity => "identity",
            Arch::ConvEncoder { .. } => "conv-encoder",
            Arch::ConvDecoder { .. } => "conv-decoder",
            Arch::Mlp { .. } => "mlp",
            Arch::Rrdb { .. } => "rrdb",
            Arch::UNet { .. } => "u-net",
        }
    }

    /// Single-graph forward with every weight bound as a constant.
    pub fn apply<R: Real>(&self, params: &ParamSet<R>, x: &Tensor<R>, t: Option<&[R]>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let b = g.bind(params, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv, t)?;
        Ok(g.value(y).clone())
    }
}

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f32> {
    (0..n).map(|_| (bound * (2.0 * rng.random::<f64>() - 1.0)) as f32).collect()
}

/// A `k×k` convolution, plain when `expand <= 1`, otherwise a collapsible pair
/// with `expand·c_out` hidden channels.
#[allow(clippy::too_many_arguments)]
fn conv_init(p: &mut ParamSet<f32>, rng: &mut Rng, name: &str, c_in: usize, c_out: usize, k: usize, expand: usize, gain: f64) {
    let fan_in = c_in * k * k;
    let bound = gain / (fan_in as f64).sqrt();
    if expand <= 1 {
        p.insert(format!("{name}.w"), Tensor::new(&[c_out, c_in, k, k], uniform(rng, c_out * fan_in, bound)).expect("shape"));
        p.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    } else {
        let hidden = expand * c_out;
        p.insert(format!("{name}.w3"), Tensor::new(&[hidden, c_in, k, k], uniform(rng, hidden * fan_in, bound)).expect("shape"));
        p.insert(format!("{name}.b3"), Tensor::zeros(&[hidden]));
        let b1 = gain / (hidden as f64).sqrt();
        p.insert(format!("{name}.w1"), Tensor::new(&[c_out, hidden, 1, 1], uniform(rng, c_out * hidden, b1)).expect("shape"));
        p.insert(format!("{name}.b1"), Tensor::zeros(&[c_out]));
    }
}

fn dense_init(p: &mut ParamSet<f32>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], uniform(rng, fan_in * fan_out, bound)).expect("shape"));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Convolution layer `name`, plain or expanded depending on which weights are bound.
pub fn conv<R: Real>(g: &mut Graph<R>, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    if let Ok(w) = b.get(&format!("{name}.w")) {
        let y = g.conv2d(x, w, stride, pad)?;
        return g.add_bias(y, b.get(&format!("{name}.b"))?);
    }
    let h = g.conv2d(x, b.get(&format!("{name}.w3"))?, stride, pad)?;
    let h = g.add_bias(h, b.get(&format!("{name}.b3"))?)?;
    let y = g.conv2d(h, b.get(&format!("{name}.w1"))?, 1, 0)?;
    g.add_bias(y, b.get(&format!("{name}.b1"))?)
}

pub fn dense<R: Real>(g: &mut Graph<R>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, b.get(&format!("{name}.w"))?)?;
    g.add_bias(y, b.get(&format!("{name}.b"))?)
}

/// Folds a 3×3 expansion `(w3, b3)` and a 1×1 projection `(w1, b1)` into one
/// 3×3 layer: `W[o,i] = Σ_h w1[o,h]·w3[h,i]`, `b = w1·b3 + b1`.
pub fn collapse_pair<R: Real>(w3: &Tensor<R>, b3: &Tensor<R>, w1: &Tensor<R>, b1: &Tensor<R>) -> Result<(Tensor<R>, Tensor<R>)> {
    ensure!(w3.rank() == 4 && w1.rank() == 4, "collapse: kernels must be rank 4, got {:?} and {:?}", w3.shape(), w1.shape());
    let (hidden, c_in, kh, kw) = (w3.shape()[0], w3.shape()[1], w3.shape()[2], w3.shape()[3]);
    let c_out = w1.shape()[0];
    ensure!(w1.shape()[1..] == [hidden, 1, 1], "collapse: projection {:?} does not follow expansion {:?}", w1.shape(), w3.shape());
    ensure!(b3.shape() == [hidden] && b1.shape() == [c_out], "collapse: bias shapes {:?}, {:?}", b3.shape(), b1.shape());
    let inner = c_in * kh * kw;
    let (a, e) = (w1.data(), w3.data());
    let mut w = vec![R::ZERO; c_out * inner];
    let mut bias = vec![R::ZERO; c_out];
    for o in 0..c_out {
        for j in 0..inner {
            let s: f64 = (0..hidden).map(|h| a[o * hidden + h].to_f64() * e[h * inner + j].to_f64()).sum();
            w[o * inner + j] = R::from_f64(s);
        }
        let s: f64 = (0..hidden).map(|h| a[o * hidden + h].to_f64() * b3.data()[h].to_f64()).sum();
        bias[o] = R::from_f64(s + b1.data()[o].to_f64());
    }
    Ok((Tensor::new(&[c_out, c_in, kh, kw], w)?, Tensor::new(&[c_out], bias)?))
}

/// Replaces every collapsible pair in `params` by its folded plain layer.
pub fn collapse_params<R: Real>(params: &ParamSet<R>) -> Result<ParamSet<R>> {
    let mut out = ParamSet::new();
    out.step = params.step;
    for (name, t) in params.iter() {
        if let Some(layer) = name.strip_suffix(".w3") {
            let get = |s: &str| params.require(&format!("{layer}.{s}"));
            let (w, b) = collapse_pair(t, get("b3")?, get("w1")?, get("b1")?)?;
            out.insert(format!("{layer}.w"), w);
            out.insert(format!("{layer}.b"), b);
        } else if [".b3", ".w1", ".b1"].iter().any(|s| name.ends_with(s)) {
            continue;
        } else {
            out.insert(name, t.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, "test");
        let n = shape.iter().product();
        Tensor::new(shape, uniform(&mut r, n, 1.0)).unwrap()
    }

    #[test]
    fn shapes_line_up() {
        let mut r = rng::stream(0, "init");
        let cases: Vec<(Arch, Vec<usize>, Vec<usize>)> = vec![
            (Arch::ConvEncoder { in_ch: 1, hidden: 8, latent_ch: 4 }, vec![3, 1, 16, 16], vec![3, 4, 4, 4]),
            (Arch::ConvDecoder { latent_ch: 4, hidden: 8, out_ch: 1 }, vec![3, 4, 4, 4], vec![3, 1, 16, 16]),
            (Arch::Rrdb { ch: 4, width: 8, growth: 4, blocks: 2 }, vec![3, 4, 4, 4], vec![3, 4, 4, 4]),
            (Arch::UNet { ch: 4, widths: [4, 8, 8], expand: 1 }, vec![3, 4, 4, 4], vec![3, 4, 4, 4]),
            (Arch::UNet { ch: 4, widths: [4, 8, 8], expand: 2 }, vec![3, 4, 4, 4], vec![3, 4, 4, 4]),
            (Arch::Mlp { dims: vec![2, 8, 2], time: true }, vec![3, 2, 1, 1], vec![3, 2, 1, 1]),
            (Arch::Identity, vec![3, 2, 1, 1], vec![3, 2, 1, 1]),
        ];
        for (arch, input, output) in cases {
            let p = arch.init(&mut r);
            let t = arch.takes_time().then(|| vec![0.1f32, 0.5, 0.9]);
            let y = arch.apply(&p, &random_input(&input, 1), t.as_deref()).unwrap();
            assert_eq!(y.shape(), output.as_slice(), "{arch:?}");
        }
    }

    #[test]
    fn time_input_is_checked() {
        let arch = Arch::UNet { ch: 4, widths: [4, 8, 8], expand: 1 };
        let p = arch.init(&mut rng::stream(0, "init"));
        assert!(arch.apply(&p, &random_input(&[1, 4, 4, 4], 0), None).is_err());
    }

    #[test]
    fn collapsed_unet_matches_expanded() {
        let arch = Arch::UNet { ch: 4, widths: [4, 8, 8], expand: 4 };
        let p = arch.init(&mut rng::stream(3, "init"));
        let plain = collapse_params(&p).unwrap();
        assert!(plain.names().all(|n| n.ends_with(".w") || n.ends_with(".b")));
        let x = random_input(&[5, 4, 4, 4], 9);
        let t = [0.0f32, 0.2, 0.4, 0.6, 1.0];
        let a = arch.apply(&p, &x, Some(&t)).unwrap();
        let b = arch.apply(&plain, &x, Some(&t)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
    }

    #[test]
    fn rrdb_starts_near_identity() {
        let arch = Arch::Rrdb { ch: 4, width: 8, growth: 4, blocks: 3 };
        let p = arch.init(&mut rng::stream(0, "init"));
        let x = random_input(&[2, 4, 4, 4], 1);
        let y = arch.apply(&p, &x, None).unwrap();
        let rel = y.sub(&x).unwrap().sq_norm_f64().sqrt() / x.sq_norm_f64().sqrt();
        assert!(rel < 0.5, "relative change {rel}");
    }
}
