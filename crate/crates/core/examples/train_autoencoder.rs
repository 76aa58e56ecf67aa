// Trains the convolutional autoencoder that defines the latent space, then
// round-trips it through the checkpoint format.
//
// ```text
// cargo run --release --example train_autoencoder            # 4 epochs on 256 images
// cargo run --release --example train_autoencoder -- --full  # the default 30 epochs on 2048
// ```

use latent_restore::degrade::ParamRanges;
use latent_restore::experiment::{synth_dataset, DatasetSpec, Generator};
use latent_restore::latent::{reconstruction_mse, train_autoencoder, AeTrainConfig, AutoEncoder};
use latent_restore::numerics::Checkpoint;
use latent_restore::{rng, Result};

fn run(train_count: usize, epochs: usize) -> Result<()> {
    let spec = DatasetSpec { size: 16, channels: 1, count: train_count, generator: Generator::GaussianBlobs };
    let train = synth_dataset(&spec, &ParamRanges::desk(), 1)?.hq();
    let held_out = synth_dataset(&DatasetSpec { count: 64, ..spec }, &ParamRanges::desk(), 2)?.hq();

    let cfg = AeTrainConfig { epochs, ..AeTrainConfig::default() };
    let ae = AutoEncoder::conv((16, 16, 1), cfg.hidden, cfg.latent_ch, &mut rng::stream(3, "example/ae"))?;
    println!("latent {:?} = {} values per image, compression {}x", ae.latent_shape, ae.latent_dim(), ae.compression_factor());
    let trained = train_autoencoder(ae, &train, &held_out, &cfg, 4, None)?;
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}  train mse {l:.5}", e + 1);
    }
    println!("held-out reconstruction error {:.5}", trained.delta_hat);

    let bytes = trained.ae.to_checkpoint(trained.delta_hat)?.to_bytes();
    let (back, delta) = AutoEncoder::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    assert_eq!(delta, trained.delta_hat);
    assert_eq!(reconstruction_mse(&back, &held_out)?, trained.delta_hat);
    println!("checkpoint: {} bytes, reloads to the same reconstructions", bytes.len());
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(64, 1)
}

fn main() -> Result<()> {
    if std::env::args().any(|a| a == "--full") {
        run(2048, 30)
    } else {
        run(256, 4)
    }
}
