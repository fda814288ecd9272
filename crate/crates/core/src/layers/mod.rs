//! Layer primitives with explicit forward and backward passes.
//!
//! Activations flow as `(N, T, C, H, W)` clips or `(F, C, H, W)` frame stacks;
//! the two share a buffer when `F = N * T`. Channel-wise layers treat axis
//! `rank - 3` as the channel axis, everything before it as batch and
//! everything after it as spatial sites.

mod activation;
mod batchnorm;
mod conv1x1;
mod spatial;
mod temporal;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{BatchNorm, BnStats, BN_EPS, BN_MOMENTUM};
pub use conv1x1::Conv1x1;
pub use spatial::{
    avg_pool2_backward, avg_pool2_forward, global_avg_pool_backward, global_avg_pool_forward,
    Conv2d, Linear,
};
pub use temporal::TemporalConv3;

use crate::error::{CtmError, Result};

/// Training uses batch statistics in batch norm; inference uses running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `(batch, channels, sites)` view of a rank-4 or rank-5 activation.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 && shape.len() != 5 {
        return Err(CtmError::invalid(format!(
            "expected a (F, C, H, W) or (N, T, C, H, W) activation, got {shape:?}"
        )));
    }
    let axis = shape.len() - 3;
    let lead = shape[..axis].iter().product();
    let sites = shape[axis + 1..].iter().product();
    Ok((lead, shape[axis], sites))
}

/// He-normal scale for a fan-in.
pub(crate) fn he_scale(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
