#![allow(dead_code)]

use latent_restore::lcfm::{dp_loss, flow_matching_loss, global_consistency_loss, l2_coarse_loss, segment_loss, CoarseEstimator, FlowConfig, NetField};
use latent_restore::nets::Arch;
use latent_restore::numerics::{check_gradients, GradCheck, Graph, ParamSet, Tensor, Var};
use latent_restore::rng;
use latent_restore::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng::normals(&mut rng::stream(seed, "test/randn"), n, 1.0)).unwrap()
}

fn params(entries: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        p.insert(*name, randn(shape, seed.wrapping_add(i as u64 * 7919)));
    }
    p
}

fn net(arch: &Arch, prefix: &str, into: &mut ParamSet<f64>, seed: u64) {
    into.extend_prefixed(prefix, &arch.init(&mut rng::stream(seed, "test/net")).cast::<f64>());
}

/// `mean((y − target)²)` against a fixed random target, so every output
/// element carries a distinct weight.
fn against(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let target = g.constant(randn(g.value(y).shape(), seed));
    g.mse(y, target)
}

fn unary(name: &str, shape: &[usize], seed: u64, op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> (String, GradCheck) {
    let p = params(&[("a", shape)], seed);
    let r = check_gradients(&p, STEP, |_| false, |g, b| {
        let y = op(g, b.get("a")?)?;
        against(g, y, seed + 1)
    })
    .unwrap();
    (name.to_string(), r)
}

fn binary(name: &str, sa: &[usize], sb: &[usize], seed: u64, op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> (String, GradCheck) {
    let p = params(&[("a", sa), ("b", sb)], seed);
    let r = check_gradients(&p, STEP, |_| false, |g, bd| {
        let y = op(g, bd.get("a")?, bd.get("b")?)?;
        against(g, y, seed + 1)
    })
    .unwrap();
    (name.to_string(), r)
}

fn arch_case(name: &str, arch: Arch, input: &[usize], seed: u64) -> (String, GradCheck) {
    let mut p = ParamSet::new();
    net(&arch, "", &mut p, seed);
    let x = randn(input, seed + 3);
    let t: Vec<f64> = (0..input[0]).map(|i| 0.2 + 0.3 * i as f64).collect();
    let r = check_gradients(&p, STEP, |_| false, |g, b| {
        let xv = g.constant(x.clone());
        let y = arch.forward(g, b, xv, arch.takes_time().then_some(&t[..]))?;
        against(g, y, seed + 4)
    })
    .unwrap();
    (name.to_string(), r)
}

fn small_unet() -> Arch {
    Arch::UNet { ch: 2, widths: [2, 3, 4], expand: 1 }
}

/// Field parameters under `theta.` and a frozen stop-gradient copy under `target.`.
fn field_params(arch: &Arch, seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    net(arch, "theta.", &mut p, seed);
    net(arch, "target.", &mut p, seed);
    p
}

fn frozen_target(name: &str) -> bool {
    name.starts_with("target.") || name.starts_with("dec.")
}

fn latent_pair(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    (randn(&[n, 2, 4, 4], seed), randn(&[n, 2, 4, 4], seed + 1))
}

fn times(n: usize, hi: f64) -> Vec<f64> {
    (0..n).map(|i| hi * (i as f64 + 0.37) / n as f64).collect()
}

fn seg_case(name: &str, cfg: FlowConfig, seed: u64) -> (String, GradCheck) {
    let arch = small_unet();
    let p = field_params(&arch, seed);
    let (z0, z1) = latent_pair(3, seed + 10);
    let t = times(3, 1.0 - cfg.delta_t);
    let r = check_gradients(&p, STEP, frozen_target, |g, b| {
        let (bt, bm) = (b.strip_prefix("theta."), b.strip_prefix("target."));
        let live = NetField { arch: &arch, bound: &bt };
        let target = NetField { arch: &arch, bound: &bm };
        Ok(segment_loss(g, &live, &target, &z0, &z1, &t, &cfg)?.loss)
    })
    .unwrap();
    (name.to_string(), r)
}

enum DpPart {
    Mse,
    Dp,
}

fn dp_case(name: &str, field: Arch, part: DpPart, seed: u64) -> (String, GradCheck) {
    let dec = Arch::ConvDecoder { latent_ch: 2, hidden: 3, out_ch: 1 };
    let mut p = field_params(&field, seed);
    net(&dec, "dec.", &mut p, seed + 1);
    let (z0, z1) = latent_pair(2, seed + 10);
    let x = randn(&[2, 1, 16, 16], seed + 12);
    let cfg = FlowConfig { beta: 0.3, alpha: 0.1, ..FlowConfig::default() };
    let t = times(2, 1.0 - cfg.delta_t);
    let r = check_gradients(&p, STEP, frozen_target, |g, b| {
        let (bt, bm, bd) = (b.strip_prefix("theta."), b.strip_prefix("target."), b.strip_prefix("dec."));
        let live = NetField { arch: &field, bound: &bt };
        let target = NetField { arch: &field, bound: &bm };
        let xv = g.constant(x.clone());
        let terms = dp_loss(g, &live, &target, &dec, &bd, &z0, &z1, xv, &t, &cfg)?;
        Ok(match part {
            DpPart::Mse => terms.mse,
            DpPart::Dp => terms.dp,
        })
    })
    .unwrap();
    (name.to_string(), r)
}

/// At least twenty configurations: every differentiable primitive, every
/// architecture and every training loss, checked in f64.
pub fn gradient_cases() -> Vec<(String, GradCheck)> {
    let mut out = vec![
        binary("add", &[2, 3], &[2, 3], 1, |g, a, b| g.add(a, b)),
        binary("sub", &[2, 3], &[2, 3], 2, |g, a, b| g.sub(a, b)),
        binary("mul", &[3, 2], &[3, 2], 3, |g, a, b| g.mul(a, b)),
        unary("scale", &[4], 4, |g, a| g.scale(a, -1.7)),
        unary("scale_rows", &[3, 2, 2], 5, |g, a| g.scale_rows(a, &[0.5, -2.0, 1.25])),
        binary("add_bias", &[2, 3, 2, 2], &[3], 6, |g, a, b| g.add_bias(a, b)),
        unary("silu", &[2, 5], 7, |g, a| g.silu(a)),
        unary("square", &[6], 8, |g, a| g.square(a)),
        binary("matmul", &[3, 4], &[4, 2], 9, |g, a, b| g.matmul(a, b)),
        binary("conv2d stride 1 pad 1", &[2, 2, 5, 5], &[3, 2, 3, 3], 10, |g, a, b| g.conv2d(a, b, 1, 1)),
        binary("conv2d stride 2 pad 1", &[1, 2, 6, 6], &[2, 2, 3, 3], 11, |g, a, b| g.conv2d(a, b, 2, 1)),
        binary("conv2d 1x1", &[2, 3, 3, 3], &[2, 3, 1, 1], 12, |g, a, b| g.conv2d(a, b, 1, 0)),
        unary("upsample", &[1, 2, 2, 3], 13, |g, a| g.upsample(a, 2)),
        binary("concat", &[2, 1, 2, 2], &[2, 3, 2, 2], 14, |g, a, b| g.concat(&[a, b, a])),
        unary("reshape", &[2, 3, 2], 15, |g, a| g.reshape(a, &[4, 3])),
        unary("sum", &[2, 3], 16, |g, a| {
            let s = g.square(a)?;
            g.sum(s)
        }),
        unary("mean", &[2, 3], 17, |g, a| {
            let s = g.square(a)?;
            g.mean(s)
        }),
        binary("mse", &[2, 3], &[2, 3], 18, |g, a, b| g.mse(a, b)),
        arch_case("conv encoder", Arch::ConvEncoder { in_ch: 1, hidden: 3, latent_ch: 2 }, &[2, 1, 8, 8], 19),
        arch_case("conv decoder", Arch::ConvDecoder { latent_ch: 2, hidden: 3, out_ch: 1 }, &[2, 2, 2, 2], 20),
        arch_case("mlp with time", Arch::Mlp { dims: vec![4, 5, 4], time: true }, &[3, 4, 1, 1], 21),
        arch_case("rrdb", Arch::Rrdb { ch: 2, width: 3, growth: 2, blocks: 2 }, &[2, 2, 4, 4], 22),
        arch_case("u-net", small_unet(), &[2, 2, 4, 4], 23),
        arch_case("u-net with collapsible blocks", Arch::UNet { ch: 2, widths: [2, 2, 3], expand: 2 }, &[1, 2, 4, 4], 24),
    ];

    // L2 coarse loss through both the copied encoder and g.
    {
        let enc_arch = Arch::ConvEncoder { in_ch: 1, hidden: 3, latent_ch: 2 };
        let g_arch = Arch::Rrdb { ch: 2, width: 3, growth: 2, blocks: 1 };
        let mut p = ParamSet::new();
        net(&enc_arch, "enc.", &mut p, 25);
        net(&g_arch, "g.", &mut p, 26);
        let ce = CoarseEstimator { enc_arch: enc_arch.clone(), enc: ParamSet::new(), g_arch: g_arch.clone(), g: ParamSet::new() };
        let y = randn(&[2, 1, 16, 16], 27);
        let z1 = randn(&[2, 2, 4, 4], 28);
        let r = check_gradients(&p, STEP, |_| false, |g, b| {
            let (be, bg) = (b.strip_prefix("enc."), b.strip_prefix("g."));
            let (yv, zv) = (g.constant(y.clone()), g.constant(z1.clone()));
            Ok(l2_coarse_loss(g, &ce, &be, &bg, yv, zv)?.0)
        })
        .unwrap();
        out.push(("L2 coarse loss".into(), r));
    }

    out.push(seg_case("segment loss K=3", FlowConfig::default(), 30));
    out.push(seg_case("segment loss K=1, alpha=0.5", FlowConfig { k: 1, alpha: 0.5, ..FlowConfig::default() }, 31));

    {
        let arch = small_unet();
        let p = field_params(&arch, 32);
        let (z0, z1) = latent_pair(3, 33);
        let t = times(3, 0.9);
        let r = check_gradients(&p, STEP, frozen_target, |g, b| {
            let (bt, bm) = (b.strip_prefix("theta."), b.strip_prefix("target."));
            global_consistency_loss(g, &NetField { arch: &arch, bound: &bt }, &NetField { arch: &arch, bound: &bm }, &z0, &z1, &t, 0.1, 0.2, 1e-5)
        })
        .unwrap();
        out.push(("global consistency loss".into(), r));
    }

    out.push(dp_case("L_MSE through the frozen decoder", small_unet(), DpPart::Mse, 34));
    out.push(dp_case("L_DP", small_unet(), DpPart::Dp, 35));
    out.push(dp_case("L_DP with an mlp field", Arch::Mlp { dims: vec![32, 6, 32], time: true }, DpPart::Dp, 36));

    {
        let arch = small_unet();
        let mut p = ParamSet::new();
        net(&arch, "", &mut p, 37);
        let (z0, z1) = latent_pair(3, 38);
        let t = times(3, 1.0);
        let r = check_gradients(&p, STEP, |_| false, |g, b| flow_matching_loss(g, &NetField { arch: &arch, bound: b }, &z0, &z1, &t, 1e-5)).unwrap();
        out.push(("flow matching loss".into(), r));
    }
    out
}
