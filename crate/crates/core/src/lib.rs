pub mod ctm;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;
mod gemm;
pub mod rng;
pub mod tcc;
pub mod tensor;
pub mod train;

pub use error::{CtmError, Result};
pub use rng::{randn, Rng};
pub use tensor::{DType, Element, Tensor};
