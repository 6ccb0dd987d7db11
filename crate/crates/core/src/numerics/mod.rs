//! Dense tensors, reverse-mode autodiff, and the optimizer pieces used by
//! the masked autoencoder and the downstream probe.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{adamw_step, clip_global_norm, cosine_lr, AdamWConfig, LrSchedule, OptimizerState, ParamSet};
pub use tensor::{Scalar, Tensor};
