//! Central finite-difference checks.
//!
//! The checker only ever calls a forward loss function, so it stays independent
//! of the backward code it verifies.

use crate::params::{Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`rel_error`]. Components whose gradient magnitude is
/// below this are compared in absolute terms scaled by the floor, since central
/// differences of an O(1) loss carry ~1e-11 rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Relative gap between the central differences at `FD_STEP` and `FD_STEP / 10`
/// above which the stencil is taken to straddle a kink (a ReLU switching
/// inside `x +- h`). Smooth losses at these scales stay below 1e-7.
pub const KINK_GAP: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
    /// Entries graded on the finer step because the coarse stencil crossed a kink.
    pub kinks: usize,
}

impl GradReport {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
            kinks: 0,
        }
    }

    /// `coarse` and `fine` are central differences at `FD_STEP` and `FD_STEP / 10`.
    fn record(&mut self, index: usize, analytic: f64, coarse: f64, fine: f64) {
        let mut numeric = coarse;
        if rel_error(coarse, fine) > KINK_GAP && rel_error(analytic, fine) < rel_error(analytic, coarse) {
            numeric = fine;
            self.kinks += 1;
        }
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((index, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Indices to probe: all of them, or `limit` distinct ones drawn from `rng`.
pub fn probe_indices(len: usize, limit: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..len).collect(),
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(x: &Tensor, index: usize, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut probe = x.clone();
    let base = probe.data()[index];
    probe.data_mut()[index] = base + h;
    let plus = f(&probe);
    probe.data_mut()[index] = base - h;
    let minus = f(&probe);
    (plus - minus) / (2.0 * h)
}

/// Compares `analytic` against finite differences of `loss` around `x`.
pub fn check_input(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    indices: &[usize],
    mut loss: impl FnMut(&Tensor) -> f64,
) -> GradReport {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch for {name}");
    let mut report = GradReport::new(name);
    for &i in indices {
        let coarse = central_difference(x, i, FD_STEP, &mut loss);
        let fine = central_difference(x, i, FD_STEP / 10.0, &mut loss);
        report.record(i, analytic.data()[i], coarse, fine);
    }
    report
}

/// Checks every trainable tensor of `model` against the matching tensor of
/// `grads` (a value of the same type holding gradients). At most
/// `per_tensor` entries of each tensor are probed.
pub fn check_module<M: Module + Clone>(
    model: &M,
    grads: &M,
    per_tensor: Option<usize>,
    rng: &mut Rng,
    mut loss: impl FnMut(&M) -> f64,
) -> Vec<GradReport> {
    let mut analytic: Vec<(String, Tensor)> = Vec::new();
    grads.visit("", &mut |name, t, kind| {
        if kind.trainable() {
            analytic.push((name, t.clone()));
        }
    });
    let mut reports = Vec::new();
    for (slot, (name, grad)) in analytic.iter().enumerate() {
        let mut report = GradReport::new(name.clone());
        for i in probe_indices(grad.len(), per_tensor, rng) {
            let mut eval = |delta: f64| {
                let mut probe = model.clone();
                let mut seen = 0;
                probe.visit_mut("", &mut |_, t, kind: ParamKind| {
                    if kind.trainable() {
                        if seen == slot {
                            t.data_mut()[i] += delta;
                        }
                        seen += 1;
                    }
                });
                loss(&probe)
            };
            let coarse = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let fine = (eval(FD_STEP / 10.0) - eval(-FD_STEP / 10.0)) / (0.2 * FD_STEP);
            report.record(i, grad.data()[i], coarse, fine);
        }
        reports.push(report);
    }
    reports
}
