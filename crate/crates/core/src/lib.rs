pub mod distill;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use tensor::{Scalar, Tensor, TensorError};
