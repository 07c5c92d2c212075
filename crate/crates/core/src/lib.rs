//! Global self-attention (GSA) modules and GSA-ResNet networks on a small dense-tensor engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: tensors, Einstein-summation contraction, softmax, batch norm, pooling.
//! - [`attention`]: the GSA module (content + axial positional attention) with analytic gradients.
//! - [`model`]: ResNet / GSA-ResNet builders, inference, and a toy trainer.
//! - [`cost`]: parameter and FLOP accounting plus an empirical scaling benchmark.
//! - [`verify`]: loop-based oracles, gradient checks and equivariance harnesses.

pub mod attention;
pub mod cost;
mod error;
pub mod model;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError};
