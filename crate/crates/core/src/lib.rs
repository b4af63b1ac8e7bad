//! Edge-guided monocular depth estimation built on a small dense-tensor
//! engine with reverse-mode automatic differentiation.

pub mod attention;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
