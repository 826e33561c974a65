//! Minimal reverse-mode differentiation engine and the layers the transfer
//! models need: valid 2-D convolution, max pooling, dense, leaky ReLU, ReLU,
//! softmax, cross-entropy, gradient reversal, and plain SGD.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::{ConvGeom, PoolGeom, LEAKY_SLOPE, PROB_FLOOR};
pub use params::{sgd_step, Gradients, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::Rng;

/// Uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("product of shape")
}
