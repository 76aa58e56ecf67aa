//! Lightweight image restoration by consistency flow matching in a learned latent space.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] – tensors, reverse-mode gradients, AdamW, EMA, checkpoints.
//! * [`degrade`] – the synthetic blur → resample → noise → compress pipeline.
//! * [`nets`] – the convolutional and dense architectures used everywhere.
//! * [`latent`] – the frozen autoencoder and collapsible linear blocks.
//! * [`lcfm`] – straight-path trajectories, the multi-segment consistency loss,
//!   the coarse estimator objective and the joint training step.
//! * [`restore`] – few-step Euler inference and the two ablation baselines.
//! * [`eval`] – PSNR/SSIM, exact discrete W₂, Gaussian Fréchet distance, and
//!   the empirical W₂ bound verifier.
//! * [`experiment`] – configs, dataset containers, end-to-end runs and sweeps.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod degrade;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod latent;
pub mod lcfm;
pub mod nets;
pub mod numerics;
pub mod restore;
pub mod rng;

pub use error::{Error, Result};
pub use image::Image;
