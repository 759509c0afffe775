//! Block-based compressive sensing with a learned measurement operator and
//! full-image reconstruction, trained with hand-written differentiable kernels.

pub mod check;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
