pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fr;
pub mod layer;
pub mod loss;
pub mod network;
pub mod nn;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
