//! Differentiable operations. Each op computes its value eagerly and
//! registers a backward rule on the tape of its inputs.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use conv::Conv2dOptions;
pub use elementwise::{sigmoid_scalar, silu_scalar, softplus_inverse, softplus_scalar};
pub use shape::{pixel_shuffle_tensor, pixel_unshuffle_tensor};

pub(crate) use linalg::{matmul_raw, transpose_raw};
