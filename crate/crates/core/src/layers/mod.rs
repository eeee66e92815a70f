//! LeNet-5 style building blocks, each with an analytic backward pass.

mod activation;
mod conv;
mod fc;
mod loss;
mod pool;

pub use activation::{relu, relu_backward, selu, selu_backward, SELU_ALPHA, SELU_LAMBDA};
pub use conv::{Connectivity, ConvGrads, ConvLayer};
pub use fc::{FcGrads, FcLayer};
pub use loss::{one_hot, softmax, softmax_cross_entropy};
pub use pool::{AvgPoolLayer, PoolGrads};

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// Glorot-uniform weights: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..limit)))
}
