// Reverse-mode gradients of a small convolutional loss, checked against
// central finite differences in f64.
//
// ```text
// cargo run --example autograd_check
// ```

use latent_restore::numerics::{check_gradients, grad, ParamSet, Tensor};
use latent_restore::{rng, Result};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng::normals(&mut rng::stream(seed, "example/randn"), n, 1.0)).expect("shape")
}

pub fn run_example() -> Result<()> {
    let mut p = ParamSet::<f64>::new();
    p.insert("w", randn(&[3, 2, 3, 3], 1));
    p.insert("b", randn(&[3], 2));
    let x = randn(&[2, 2, 6, 6], 3);
    let target = randn(&[2, 3, 6, 6], 4);

    let loss = |g: &mut latent_restore::numerics::Graph<f64>, b: &latent_restore::numerics::Bound| {
        let xv = g.constant(x.clone());
        let h = g.conv2d(xv, b.get("w")?, 1, 1)?;
        let h = g.add_bias(h, b.get("b")?)?;
        let h = g.silu(h)?;
        let t = g.constant(target.clone());
        g.mse(h, t)
    };

    let (value, grads) = grad(&p, |_| false, loss)?;
    println!("loss {value:.6}, |dL/dw| {:.6}, |dL/db| {:.6}", grads.require("w")?.sq_norm_f64().sqrt(), grads.require("b")?.sq_norm_f64().sqrt());

    let check = check_gradients(&p, 1e-5, |_| false, loss)?;
    println!("{} scalars checked, relative error {:.2e}", check.checked, check.rel_error);
    assert!(check.rel_error < 1e-6);

    // Freezing a parameter removes it from the check and from the update.
    let frozen = check_gradients(&p, 1e-5, |n| n == "w", loss)?;
    println!("with w frozen: {} scalars checked", frozen.checked);
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
