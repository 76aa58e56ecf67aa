//! Tensor arithmetic, reverse-mode gradients, AdamW and EMA.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{grad, Bound, Grads, Graph, Var};
pub use optim::{ema_update, AdamWConfig, OptimState};
pub use params::ParamSet;
pub use tensor::num_like::Real;
pub use tensor::{DType, Tensor};
