// Walks one synthetic image through blur, resampling, noise and block-DCT
// compression, scoring each stage against the clean input.
//
// ```text
// cargo run --example degradation_pipeline
// ```

use latent_restore::degrade::{add_noise, dct_compress_with_base, degrade, gaussian_blur, resample, resize_bilinear, sample_params, Direction, ParamRanges};
use latent_restore::eval::{psnr, ssim};
use latent_restore::experiment::Generator;
use latent_restore::{Image, Result};

fn score(label: &str, x: &Image, y: &Image) -> Result<()> {
    let y = resize_bilinear(y, x.height(), x.width())?.clip_unit();
    println!("{label:<12} psnr {:6.2} dB  ssim {:.3}", psnr(x, &y, 1.0)?, ssim(x, &y)?);
    Ok(())
}

pub fn run_example() -> Result<()> {
    let x = Generator::GaussianBlobs.render(16, 1, 7)?;
    let p = sample_params(&ParamRanges::desk(), 7)?;
    println!("sigma {:.2}, r {:.2}, delta {:.4}, q {}", p.sigma, p.r, p.delta, p.q);

    let blurred = gaussian_blur(&x, p.sigma, p.kernel_size)?;
    score("blur", &x, &blurred)?;
    let small = resample(&blurred, p.r, Direction::Down)?;
    println!("{:<12} {}x{}", "downsampled", small.height(), small.width());
    score("resample", &x, &small)?;
    let noisy = add_noise(&small, p.delta, 7)?;
    score("noise", &x, &noisy)?;
    let coded = dct_compress_with_base(&noisy, p.q, p.dct_base)?;
    score("compress", &x, &coded)?;

    // The composed pipeline reproduces the staged result for the same seed.
    let y = degrade(&x, &p, 7)?;
    let staged = resize_bilinear(&coded, 16, 16)?.clip_unit();
    assert_eq!(y, staged);
    score("degrade", &x, &y)?;
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
