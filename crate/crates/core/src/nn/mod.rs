//! The differentiable-array engine: tape autograd, kernels, Adam,
//! gradient checking, and the PACK checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod tensor;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use ops::conv2d_stride2;
pub use tensor::{Element, Tape, Var};

/// A named trainable tensor. Names are stable across runs and become
/// checkpoint keys.
#[derive(Debug, Clone)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub value: ArrayD<E>,
}

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases elsewhere
/// are zero-filled. Draws are f64 in row-major element order, so f32
/// and f64 instantiations of a model see identical values.
pub fn glorot_uniform<E: Element>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<E> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        E::from_f64(rng.random_range(-limit..limit))
    })
}
