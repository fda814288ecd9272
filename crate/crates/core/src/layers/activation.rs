use crate::error::{CtmError, Result};
use crate::tensor::Tensor;

/// `max(x, 0)`; NaN passes through so divergence stays visible.
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v < 0.0 { 0.0 } else { v })
}

/// Passes `d_out` where `x > 0`.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    if x.shape() != d_out.shape() {
        return Err(CtmError::invalid(format!(
            "relu backward shape mismatch {:?} vs {:?}",
            x.shape(),
            d_out.shape()
        )));
    }
    x.zip_map(d_out, "relu_backward", |v, g| if v > 0.0 { g } else { 0.0 })
}
