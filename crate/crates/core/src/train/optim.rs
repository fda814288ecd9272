use serde::{Deserialize, Serialize};

use crate::error::{CtmError, Result};
use crate::params::{trainable, trainable_mut, Module, ParamKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_init: 0.02,
            lr_decay_epochs: vec![15, 25],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CtmError::config("batch_size must be positive"));
        }
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("lr_decay_factor", self.lr_decay_factor),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CtmError::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `lr_init * factor^(number of decay epochs <= epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr_init * cfg.lr_decay_factor.powi(decays as i32)
}

/// One momentum-SGD step over every trainable tensor:
/// `v <- momentum v + (g + wd p)`, `p <- p - lr v`. Batch-norm scale and shift
/// are not decayed.
pub fn sgd_step<M: Module>(params: &mut M, grads: &M, velocity: &mut M, cfg: &TrainConfig, lr: f64) {
    let g = trainable(grads);
    let v = trainable_mut(velocity);
    let p = trainable_mut(params);
    assert!(
        g.len() == p.len() && v.len() == p.len(),
        "parameter, gradient and velocity structures differ"
    );
    for (((p, kind), (g, _)), (v, _)) in p.into_iter().zip(g).zip(v) {
        let wd = if kind == ParamKind::Norm { 0.0 } else { cfg.weight_decay };
        let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
        assert!(pd.len() == gd.len() && pd.len() == vd.len(), "tensor size mismatch");
        for ((pv, &gv), vv) in pd.iter_mut().zip(gd).zip(vd.iter_mut()) {
            *vv = cfg.momentum * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
}
