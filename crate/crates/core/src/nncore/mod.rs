//! Differentiable building blocks: tensors, causal convolution kernels, a reverse-mode
//! tape, parameter storage and the Adam optimizer.

mod adam;
mod graph;
pub mod kernels;
mod param;
mod real;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Mode, NodeId, BN_EPS, BN_MOMENTUM};
pub use kernels::ConvGeometry;
pub use param::{ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

/// Kaiming-uniform bound `1 / sqrt(fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[cfg(test)]
mod gradcheck;
