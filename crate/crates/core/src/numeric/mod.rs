//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.

mod graph;
mod kernels;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var, BCE_CLAMP};
pub use ops::{bce_sum, LAYER_NORM_EPS};
pub use optim::{adam_step, lr_schedule, AdamState, StepDecay};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
pub mod gradcheck;

#[cfg(test)]
mod tests;
