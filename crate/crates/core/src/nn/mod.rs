//! Minimal dense neural-network toolkit: binary32 tensors, kernels with
//! explicit backward passes, AdamW, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
mod store;
mod tensor;

pub use gradcheck::{grad_check, grad_check_input, GradCheckConfig, GradCheckReport};
pub use layers::{Attention, FeedForward, Init, LayerNorm, Linear};
pub use optim::AdamW;
pub use store::{Gradients, ParamId, ParameterStore};
pub use tensor::Tensor;
