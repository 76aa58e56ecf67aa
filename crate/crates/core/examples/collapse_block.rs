// Folds a 3×3 convolution followed by a 1×1 convolution into one 3×3
// kernel and compares the two forms on random inputs.
//
// ```text
// cargo run --example collapse_block
// ```

use latent_restore::latent::CollapsibleBlock;
use latent_restore::numerics::Tensor;
use latent_restore::{rng, Result};

pub fn run_example() -> Result<()> {
    let mut r = rng::stream(3, "example/collapse");
    for expansion in [1, 2, 4, 8] {
        let block = CollapsibleBlock::random(4, 6, expansion, &mut r);
        let x = Tensor::new(&[2, 4, 8, 8], rng::normals(&mut r, 2 * 4 * 64, 1.0).into_iter().map(|v| v as f32).collect())?;
        let (w, _) = block.collapse()?;
        let err = block.forward_expanded(&x)?.max_abs_diff(&block.forward_collapsed(&x)?)?;
        println!("expansion {expansion}: hidden {:>2} channels -> kernel {:?}, max abs error {err:.2e}", block.conv3.shape()[0], w.shape());
        assert!(err < 1e-5);
    }
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
