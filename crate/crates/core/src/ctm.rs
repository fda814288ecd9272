//! The CTM block: a parameter-free identity shortcut plus two temporal paths.
//!
//! Both paths share one scaffold: reduce (1x1) -> BN -> ReLU -> temporal op ->
//! BN -> ReLU -> restore (1x1) -> BN. The last BN starts with zero scale, so a
//! fresh block is the identity map. Path 1 uses the TCC operator, Path 2 a
//! `3x1x1` temporal convolution on the `(N, C, T, H, W)` view.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CtmError, Result};
use crate::layers::{relu_backward, relu_forward, BatchNorm, BnStats, Conv1x1, Mode, TemporalConv3};
use crate::params::{join, Module, ParamKind};
use crate::rng::Rng;
use crate::tcc::{tcc_backward, tcc_forward_fast, PaddingPolicy, TccKernel};
use crate::tensor::Tensor;

/// Temporal operator sitting in the middle of a path. Input and output are
/// `(N, T, C, H, W)`.
pub trait TemporalOp: Module + Clone {
    const NAME: &'static str;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Self)>;
}

impl TemporalOp for TccKernel {
    const NAME: &'static str = "tcc";

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        tcc_forward_fast(x, self, PaddingPolicy::default())
    }

    fn adjoint(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Self)> {
        let (dx, dk) = tcc_backward(x, self, d_out, PaddingPolicy::default())?;
        Ok((dx, TccKernel::new(dk, self.spatial_extent())?))
    }
}

const TO_CHANNEL_MAJOR: [usize; 5] = [0, 2, 1, 3, 4];

impl TemporalOp for TemporalConv3 {
    const NAME: &'static str = "tconv";

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(&x.permute(&TO_CHANNEL_MAJOR)?)?.permute(&TO_CHANNEL_MAJOR)
    }

    fn adjoint(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Self)> {
        let (dx, g) = self.backward(
            &x.permute(&TO_CHANNEL_MAJOR)?,
            &d_out.permute(&TO_CHANNEL_MAJOR)?,
        )?;
        Ok((dx.permute(&TO_CHANNEL_MAJOR)?, g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<Op> {
    pub reduce: Conv1x1,
    pub bn1: BatchNorm,
    pub temporal: Op,
    pub bn2: BatchNorm,
    pub restore: Conv1x1,
    pub bn3: BatchNorm,
}

/// Path 1.
pub type Tccm = Branch<TccKernel>;
/// Path 2.
pub type Path2 = Branch<TemporalConv3>;

/// Intermediate activations of one path, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    z1: Tensor,
    a1: Tensor,
    r1: Tensor,
    z2: Tensor,
    a2: Tensor,
    r2: Tensor,
    z3: Tensor,
    stats: [Option<BnStats>; 3],
}

impl Tccm {
    pub fn random(c1: usize, c2: usize, spatial: (usize, usize), rng: &mut Rng) -> Self {
        Branch::scaffold(c1, c2, TccKernel::random(spatial.0, spatial.1, rng), rng)
    }
}

impl Path2 {
    pub fn random(c1: usize, c2: usize, rng: &mut Rng) -> Self {
        Branch::scaffold(c1, c2, TemporalConv3::random(c2, c2, rng), rng)
    }
}

impl<Op: TemporalOp> Branch<Op> {
    fn scaffold(c1: usize, c2: usize, temporal: Op, rng: &mut Rng) -> Self {
        let reduce = Conv1x1::random(c1, c2, rng);
        let restore = Conv1x1::random(c2, c1, rng);
        Self {
            reduce,
            bn1: BatchNorm::new(c2),
            temporal,
            bn2: BatchNorm::new(c2),
            restore,
            bn3: BatchNorm::zero_gamma(c1),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_cached(x, mode)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BranchCache)> {
        let z1 = self.reduce.forward(x)?;
        let (a1, s1) = self.bn1.forward(&z1, mode)?;
        let r1 = relu_forward(&a1);
        let z2 = self.temporal.apply(&r1)?;
        let (a2, s2) = self.bn2.forward(&z2, mode)?;
        let r2 = relu_forward(&a2);
        let z3 = self.restore.forward(&r2)?;
        let (y, s3) = self.bn3.forward(&z3, mode)?;
        let cache = BranchCache {
            z1,
            a1,
            r1,
            z2,
            a2,
            r2,
            z3,
            stats: [s1, s2, s3],
        };
        Ok((y, cache))
    }

    pub fn backward(&self, x: &Tensor, cache: &BranchCache, d_out: &Tensor, mode: Mode) -> Result<(Tensor, Self)> {
        let (d_z3, bn3) = self.bn3.backward(&cache.z3, d_out, mode)?;
        let (d_r2, restore) = self.restore.backward(&cache.r2, &d_z3)?;
        let d_a2 = relu_backward(&cache.a2, &d_r2)?;
        let (d_z2, bn2) = self.bn2.backward(&cache.z2, &d_a2, mode)?;
        let (d_r1, temporal) = self.temporal.adjoint(&cache.r1, &d_z2)?;
        let d_a1 = relu_backward(&cache.a1, &d_r1)?;
        let (d_z1, bn1) = self.bn1.backward(&cache.z1, &d_a1, mode)?;
        let (dx, reduce) = self.reduce.backward(x, &d_z1)?;
        Ok((
            dx,
            Self {
                reduce,
                bn1,
                temporal,
                bn2,
                restore,
                bn3,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode pass into the running ones.
    pub fn commit(&mut self, cache: &BranchCache) {
        for (bn, stats) in [&mut self.bn1, &mut self.bn2, &mut self.bn3].into_iter().zip(&cache.stats) {
            if let Some(s) = stats {
                bn.update_running(s);
            }
        }
    }
}

impl<Op: TemporalOp> Module for Branch<Op> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.temporal.visit(&join(prefix, Op::NAME), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.restore.visit(&join(prefix, "restore"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.temporal.visit_mut(&join(prefix, Op::NAME), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.restore.visit_mut(&join(prefix, "restore"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
    }
}

/// Which paths a block keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtmVariant {
    #[default]
    Full,
    Path1Only,
    Path2Only,
}

impl CtmVariant {
    pub const ALL: [CtmVariant; 3] = [CtmVariant::Full, CtmVariant::Path1Only, CtmVariant::Path2Only];

    pub fn as_str(self) -> &'static str {
        match self {
            CtmVariant::Full => "full",
            CtmVariant::Path1Only => "path1_only",
            CtmVariant::Path2Only => "path2_only",
        }
    }

    pub fn has_path1(self) -> bool {
        self != CtmVariant::Path2Only
    }

    pub fn has_path2(self) -> bool {
        self != CtmVariant::Path1Only
    }
}

impl fmt::Display for CtmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CtmVariant {
    type Err = CtmError;

    fn from_str(s: &str) -> Result<Self> {
        CtmVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CtmError::invalid(format!("unknown CTM variant '{s}' (expected full, path1_only or path2_only)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmBlock {
    pub path1: Option<Tccm>,
    pub path2: Option<Path2>,
}

#[derive(Debug, Clone)]
pub struct CtmCache {
    x: Tensor,
    path1: Option<BranchCache>,
    path2: Option<BranchCache>,
}

/// `C / reduction`, rejecting ratios that do not divide `C` evenly.
pub fn reduced_channels(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 || channels < reduction {
        return Err(CtmError::invalid(format!(
            "CTM reduction {reduction} does not divide {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

/// Closed-form trainable parameter count of a block (BN counts 2 per channel).
pub fn ctm_param_count(c1: usize, c2: usize, h: usize, w: usize, variant: CtmVariant) -> usize {
    let scaffold = 2 * c1 * c2 + 4 * c2 + 2 * c1;
    let p1 = scaffold + 9 * h * w;
    let p2 = scaffold + 3 * c2 * c2;
    match variant {
        CtmVariant::Full => p1 + p2,
        CtmVariant::Path1Only => p1,
        CtmVariant::Path2Only => p2,
    }
}

impl CtmBlock {
    /// Freshly initialized block. Both paths are always drawn from `rng` so the
    /// surviving path of an ablated block matches the full block's.
    pub fn new(
        channels: usize,
        reduction: usize,
        spatial: (usize, usize),
        variant: CtmVariant,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c2 = reduced_channels(channels, reduction)?;
        if spatial.0 == 0 || spatial.1 == 0 {
            return Err(CtmError::invalid(format!(
                "CTM spatial extent must be positive, got {}x{}",
                spatial.0, spatial.1
            )));
        }
        let path1 = Tccm::random(channels, c2, spatial, rng);
        let path2 = Path2::random(channels, c2, rng);
        Ok(Self {
            path1: Some(path1),
            path2: Some(path2),
        }
        .ablate(variant))
    }

    /// Structurally drops the disabled path.
    pub fn ablate(mut self, variant: CtmVariant) -> Self {
        if !variant.has_path1() {
            self.path1 = None;
        }
        if !variant.has_path2() {
            self.path2 = None;
        }
        self
    }

    pub fn variant(&self) -> Option<CtmVariant> {
        match (self.path1.is_some(), self.path2.is_some()) {
            (true, true) => Some(CtmVariant::Full),
            (true, false) => Some(CtmVariant::Path1Only),
            (false, true) => Some(CtmVariant::Path2Only),
            (false, false) => None,
        }
    }

    pub fn channels(&self) -> Option<usize> {
        self.path1
            .as_ref()
            .map(|p| p.reduce.in_channels())
            .or_else(|| self.path2.as_ref().map(|p| p.reduce.in_channels()))
    }

    pub fn spatial_extent(&self) -> Option<(usize, usize)> {
        self.path1.as_ref().map(|p| p.temporal.spatial_extent())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 5 {
            return Err(CtmError::invalid(format!(
                "CTM block expects (N, T, C, H, W), got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_cached(x, mode)?.0)
    }

    /// `(x + path1(x)) + path2(x)`, summed in that order.
    pub fn forward_cached(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, CtmCache)> {
        self.check_input(x)?;
        let mut out = x.clone();
        let mut cache = CtmCache {
            x: x.clone(),
            path1: None,
            path2: None,
        };
        if let Some(p) = &self.path1 {
            let (y, c) = p.forward_cached(x, mode)?;
            out.add_assign(&y)?;
            cache.path1 = Some(c);
        }
        if let Some(p) = &self.path2 {
            let (y, c) = p.forward_cached(x, mode)?;
            out.add_assign(&y)?;
            cache.path2 = Some(c);
        }
        Ok((out, cache))
    }

    pub fn backward_cached(&self, cache: &CtmCache, d_out: &Tensor, mode: Mode) -> Result<(Tensor, CtmBlock)> {
        if d_out.shape() != cache.x.shape() {
            return Err(CtmError::invalid(format!(
                "CTM output gradient has shape {:?}, expected {:?}",
                d_out.shape(),
                cache.x.shape()
            )));
        }
        let mut dx = d_out.clone();
        let mut grads = CtmBlock { path1: None, path2: None };
        if let (Some(p), Some(c)) = (&self.path1, &cache.path1) {
            let (d, g) = p.backward(&cache.x, c, d_out, mode)?;
            dx.add_assign(&d)?;
            grads.path1 = Some(g);
        }
        if let (Some(p), Some(c)) = (&self.path2, &cache.path2) {
            let (d, g) = p.backward(&cache.x, c, d_out, mode)?;
            dx.add_assign(&d)?;
            grads.path2 = Some(g);
        }
        Ok((dx, grads))
    }

    /// Recomputes the forward pass, then back-propagates `d_out`.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor, mode: Mode) -> Result<(Tensor, CtmBlock)> {
        let (_, cache) = self.forward_cached(x, mode)?;
        self.backward_cached(&cache, d_out, mode)
    }

    pub fn commit(&mut self, cache: &CtmCache) {
        if let (Some(p), Some(c)) = (&mut self.path1, &cache.path1) {
            p.commit(c);
        }
        if let (Some(p), Some(c)) = (&mut self.path2, &cache.path2) {
            p.commit(c);
        }
    }
}

impl Module for CtmBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        if let Some(p) = &self.path1 {
            p.visit(&join(prefix, "path1"), f);
        }
        if let Some(p) = &self.path2 {
            p.visit(&join(prefix, "path2"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        if let Some(p) = &mut self.path1 {
            p.visit_mut(&join(prefix, "path1"), f);
        }
        if let Some(p) = &mut self.path2 {
            p.visit_mut(&join(prefix, "path2"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, check_module, probe_indices};
    use crate::params::{count_params, named_tensors};
    use crate::rng::randn;

    /// Replaces every BN scale and shift with random values so all parameters
    /// receive gradient.
    fn randomize_norms(block: &mut CtmBlock, rng: &mut Rng) {
        block.visit_mut("", &mut |_, t, kind| {
            if kind == ParamKind::Norm {
                *t = randn(t.shape(), rng, 0.5).unwrap();
            }
        });
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut rng = Rng::new(1);
        let block = CtmBlock::new(8, 4, (3, 2), CtmVariant::Full, &mut rng).unwrap();
        let x = randn(&[2, 4, 8, 3, 2], &mut rng, 3.0).unwrap();
        assert_eq!(block.forward(&x, Mode::Eval).unwrap(), x);
        assert_eq!(block.forward(&x, Mode::Train).unwrap(), x);
    }

    #[test]
    fn spatial_mismatch_is_named() {
        let block = CtmBlock::new(4, 2, (3, 3), CtmVariant::Full, &mut Rng::new(0)).unwrap();
        let err = block.forward(&Tensor::zeros(&[1, 2, 4, 2, 2]), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("2x2"), "{err}");
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let c2 = 1 + rng.below(4);
            let red = 1 + rng.below(4);
            let (h, w) = (1 + rng.below(5), 1 + rng.below(5));
            for v in CtmVariant::ALL {
                let block = CtmBlock::new(c2 * red, red, (h, w), v, &mut rng).unwrap();
                assert_eq!(count_params(&block), ctm_param_count(c2 * red, c2, h, w, v));
            }
        }
    }

    #[test]
    fn ablated_variants_drop_paths() {
        let mut rng = Rng::new(3);
        let mut full = CtmBlock::new(8, 4, (2, 2), CtmVariant::Full, &mut rng).unwrap();
        randomize_norms(&mut full, &mut rng);
        let x = randn(&[1, 5, 8, 2, 2], &mut rng, 1.0).unwrap();
        let p1 = full.path1.as_ref().unwrap().forward(&x, Mode::Eval).unwrap();
        let p2 = full.path2.as_ref().unwrap().forward(&x, Mode::Eval).unwrap();

        let only1 = full.clone().ablate(CtmVariant::Path1Only);
        assert!(only1.path2.is_none());
        assert_eq!(only1.forward(&x, Mode::Eval).unwrap(), x.add(&p1).unwrap());
        let only2 = full.clone().ablate(CtmVariant::Path2Only);
        assert!(only2.path1.is_none());
        assert_eq!(only2.forward(&x, Mode::Eval).unwrap(), x.add(&p2).unwrap());
        assert_eq!(full.clone().ablate(CtmVariant::Full), full);
    }

    #[test]
    fn zero_path2_reduces_to_path1() {
        let mut rng = Rng::new(4);
        let mut block = CtmBlock::new(4, 2, (2, 3), CtmVariant::Full, &mut rng).unwrap();
        randomize_norms(&mut block, &mut rng);
        block.path2.as_mut().unwrap().visit_mut("", &mut |_, t, kind| {
            if kind.trainable() {
                t.fill(0.0);
            }
        });
        let x = randn(&[2, 3, 4, 2, 3], &mut rng, 1.0).unwrap();
        let p1 = block.path1.as_ref().unwrap().forward(&x, Mode::Train).unwrap();
        assert_eq!(block.forward(&x, Mode::Train).unwrap(), x.add(&p1).unwrap());
    }

    #[test]
    fn recomposition_is_bit_identical() {
        let mut rng = Rng::new(5);
        let mut block = CtmBlock::new(8, 2, (2, 2), CtmVariant::Full, &mut rng).unwrap();
        randomize_norms(&mut block, &mut rng);
        let x = randn(&[2, 4, 8, 2, 2], &mut rng, 1.0).unwrap();

        // rebuild each path from the exported tensors alone
        let exported: Vec<(String, Tensor)> = named_tensors(&block)
            .into_iter()
            .map(|(k, (t, _))| (k, t.clone()))
            .collect();
        let mut p1 = Tccm::random(8, 4, (2, 2), &mut Rng::new(99));
        let mut p2 = Path2::random(8, 4, &mut Rng::new(98));
        let load = |prefix: &str, name: String, t: &mut Tensor| {
            let key = format!("{prefix}.{name}");
            *t = exported.iter().find(|(k, _)| *k == key).unwrap().1.clone();
        };
        p1.visit_mut("", &mut |name, t, _| load("path1", name, t));
        p2.visit_mut("", &mut |name, t, _| load("path2", name, t));

        for mode in [Mode::Train, Mode::Eval] {
            let a = p1.forward(&x, mode).unwrap();
            let b = p2.forward(&x, mode).unwrap();
            let expected = x.add(&a).unwrap().add(&b).unwrap();
            assert_eq!(block.forward(&x, mode).unwrap(), expected);
        }
    }

    #[test]
    fn constant_in_time_stays_constant_on_interior_frames() {
        let mut rng = Rng::new(6);
        let mut block = CtmBlock::new(4, 2, (2, 2), CtmVariant::Full, &mut rng).unwrap();
        randomize_norms(&mut block, &mut rng);
        let frame = randn(&[4, 2, 2], &mut rng, 1.0).unwrap();
        let t = 6;
        let x = Tensor::from_fn(&[1, t, 4, 2, 2], |i| frame.get(&[i[2], i[3], i[4]]));
        for mode in [Mode::Train, Mode::Eval] {
            let ys = [
                block.path1.as_ref().unwrap().forward(&x, mode).unwrap(),
                block.path2.as_ref().unwrap().forward(&x, mode).unwrap(),
            ];
            for y in &ys {
                let size = 16;
                let first = &y.data()[size..2 * size];
                for tt in 2..t - 1 {
                    let cur = &y.data()[tt * size..(tt + 1) * size];
                    for (a, b) in first.iter().zip(cur) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_gradient_at_init() {
        let mut rng = Rng::new(7);
        let block = CtmBlock::new(4, 2, (2, 2), CtmVariant::Full, &mut rng).unwrap();
        let x = randn(&[1, 3, 4, 2, 2], &mut rng, 1.0).unwrap();
        let d = randn(x.shape(), &mut rng, 1.0).unwrap();
        let (dx, _) = block.backward(&x, &d, Mode::Train).unwrap();
        assert_eq!(dx, d);
    }

    #[test]
    fn path1_gradients_ignore_path2_values() {
        let mut rng = Rng::new(8);
        let mut block = CtmBlock::new(4, 2, (2, 2), CtmVariant::Full, &mut rng).unwrap();
        randomize_norms(&mut block, &mut rng);
        let x = randn(&[1, 3, 4, 2, 2], &mut rng, 1.0).unwrap();
        let d = randn(x.shape(), &mut rng, 1.0).unwrap();
        let (_, g1) = block.backward(&x, &d, Mode::Train).unwrap();
        let mut other = block.clone();
        other.path2 = Some(Path2::random(4, 2, &mut Rng::new(1234)));
        let (_, g2) = other.backward(&x, &d, Mode::Train).unwrap();
        assert_eq!(g1.path1, g2.path1);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let mut block = CtmBlock::new(8, 4, (2, 2), CtmVariant::Full, &mut rng).unwrap();
        randomize_norms(&mut block, &mut rng);
        let x = randn(&[1, 3, 8, 2, 2], &mut rng, 1.0).unwrap();
        let r = randn(x.shape(), &mut rng, 1.0).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let loss = |b: &CtmBlock, x: &Tensor| b.forward(x, mode).unwrap().dot(&r).unwrap();
            let (dx, grads) = block.backward(&x, &r, mode).unwrap();
            let idx = probe_indices(x.len(), None, &mut rng);
            let rep = check_input("x", &x, &dx, &idx, |p| loss(&block, p));
            assert!(rep.passes(1e-5), "{mode:?} {rep:?}");
            for rep in check_module(&block, &grads, None, &mut rng, |b| loss(b, &x)) {
                assert!(rep.passes(1e-5), "{mode:?} {rep:?}");
            }
        }
    }

    #[test]
    fn commit_updates_running_stats() {
        let mut rng = Rng::new(10);
        let mut block = CtmBlock::new(4, 2, (2, 2), CtmVariant::Full, &mut rng).unwrap();
        let x = randn(&[2, 3, 4, 2, 2], &mut rng, 2.0).unwrap();
        let (_, cache) = block.forward_cached(&x, Mode::Train).unwrap();
        let before = block.clone();
        block.commit(&cache);
        assert_ne!(before.path1.unwrap().bn1.running_mean, block.path1.unwrap().bn1.running_mean);
    }

    #[test]
    fn variant_parsing() {
        for v in CtmVariant::ALL {
            assert_eq!(v.as_str().parse::<CtmVariant>().unwrap(), v);
        }
        assert!("both".parse::<CtmVariant>().is_err());
        assert_eq!(serde_json::to_string(&CtmVariant::Path2Only).unwrap(), "\"path2_only\"");
    }
}
