//! Deform-Mamba super-resolution for MR images, built on a small `f64`
//! reverse-mode tensor engine.

pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tape;
pub mod train;
pub mod verify;
pub mod ss2d;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
