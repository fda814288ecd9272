//! Named parameter traversal.
//!
//! Every layer and composite exposes its tensors through [`Module::visit`] and
//! [`Module::visit_mut`] in one fixed order. Gradients are carried in values of
//! the same type as the module, so zipping the traversals of a model, its
//! gradient and its optimizer state lines tensors up one-to-one.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / linear weights. Subject to weight decay.
    Weight,
    /// Additive bias of a linear or convolution layer.
    Bias,
    /// Batch-norm scale and shift. Never weight-decayed.
    Norm,
    /// Non-trainable state (running statistics).
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of trainable scalars.
pub fn count_params<M: Module + ?Sized>(m: &M) -> usize {
    let mut total = 0;
    m.visit("", &mut |_, t, kind| {
        if kind.trainable() {
            total += t.len();
        }
    });
    total
}

pub fn trainable<M: Module + ?Sized>(m: &M) -> Vec<(&Tensor, ParamKind)> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t, kind| {
        if kind.trainable() {
            out.push((t, kind));
        }
    });
    out
}

pub fn trainable_mut<M: Module + ?Sized>(m: &mut M) -> Vec<(&mut Tensor, ParamKind)> {
    let mut out = Vec::new();
    m.visit_mut("", &mut |_, t, kind| {
        if kind.trainable() {
            out.push((t, kind));
        }
    });
    out
}

/// Every tensor, buffers included, by name.
pub fn named_tensors<M: Module + ?Sized>(m: &M) -> BTreeMap<String, (&Tensor, ParamKind)> {
    let mut out = BTreeMap::new();
    m.visit("", &mut |name, t, kind| {
        out.insert(name, (t, kind));
    });
    out
}

/// A copy with every tensor zeroed; the starting point for gradients and
/// optimizer state.
pub fn zeros_like<M: Module + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, t, _| t.fill(0.0));
    z
}

/// `acc += other` over trainable tensors.
pub fn accumulate<M: Module>(acc: &mut M, other: &M) {
    let src = trainable(other);
    let dst = trainable_mut(acc);
    assert_eq!(src.len(), dst.len(), "gradient structure mismatch");
    for ((d, _), (s, _)) in dst.into_iter().zip(src) {
        d.add_assign(s).expect("gradient shape mismatch");
    }
}
