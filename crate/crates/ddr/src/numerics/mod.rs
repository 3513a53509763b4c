//! Dense tensor math, reverse-mode differentiation, the optimizer, and the
//! primitive losses everything else builds on.

mod gradcheck;
mod optim;
mod params;
pub mod rng;
mod scalar;
pub(crate) mod softmax;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, LossBuilder};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{GradMap, Param, ParamSet};
pub use scalar::Scalar;
pub use softmax::softmax_cross_entropy;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::matmul_nn as matmul_for_merge;
pub use tensor::Tensor;
