//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operations the pose and classification networks need are
//! provided: pointwise (kernel-size-1) convolution, global pooling,
//! sigmoid/relu, broadcasting add/mul, the residual attention gate, and a
//! few reductions. Fused operations (pose losses, softmax cross-entropy)
//! plug in through [`CustomBackward`].

mod graph;
pub(crate) mod kernels;
mod params;
mod value;

pub mod gradcheck;

pub(crate) use graph::order_free_sum;
pub use graph::{Activation, CustomBackward, Elementwise, Gradients, Graph, Var};
pub use kernels::sigmoid;
pub use params::{derive_seed, fnv1a, Adam, Bound, ParamSet};
pub use value::Tensor;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
