//! Bottleneck backbone with CTM blocks inserted between bottlenecks, a
//! per-frame classifier and temporal-mean late fusion.

mod bottleneck;
mod checkpoint;

pub use bottleneck::{Bottleneck, BottleneckCache, Projection};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::ctm::{ctm_param_count, reduced_channels, CtmBlock, CtmCache, CtmVariant};
use crate::error::{CtmError, Result};
use crate::layers::{
    avg_pool2_backward, avg_pool2_forward, global_avg_pool_backward, global_avg_pool_forward, relu_backward,
    relu_forward, BatchNorm, BnStats, Conv2d, Linear, Mode,
};
use crate::params::{join, Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Input channels of every clip frame.
pub const INPUT_CHANNELS: usize = 3;
/// Standard deviation of the classifier weights at init.
pub const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub input_spatial: (usize, usize),
    pub num_classes: usize,
    /// `(stage, position)`: a CTM block after the `position`-th bottleneck of
    /// `stage` (0 = before the first).
    pub ctm_plan: Vec<(usize, usize)>,
    pub ctm_reduction: usize,
    #[serde(default)]
    pub ctm_variant: CtmVariant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128],
            stage_depths: vec![2, 2, 6, 2],
            input_spatial: (32, 32),
            num_classes: 4,
            ctm_plan: vec![(2, 1), (2, 3), (2, 5)],
            ctm_reduction: 4,
            ctm_variant: CtmVariant::Full,
        }
    }
}

/// Channels and spatial extent of the activation flowing between units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

/// One slot of the unit sequence, with the feature shape it consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Bottleneck { stage: usize, index: usize, input: FeatureShape, out_channels: usize, stride: usize },
    Ctm { stage: usize, index: usize, input: FeatureShape },
}

impl NetworkConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn baseline(&self) -> Self {
        Self {
            ctm_plan: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages == 0 || stages != self.stage_depths.len() {
            return Err(CtmError::config(format!(
                "stage_channels ({}) and stage_depths ({}) must be non-empty and of equal length",
                stages,
                self.stage_depths.len()
            )));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return Err(CtmError::config(format!(
                "stage channels must be positive multiples of 4, got {c}"
            )));
        }
        if self.stage_depths.contains(&0) {
            return Err(CtmError::config("every stage needs at least one bottleneck"));
        }
        let (h, w) = self.input_spatial;
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(CtmError::config(format!(
                "input_spatial must be even and at least 2x2, got {h}x{w}"
            )));
        }
        if self.num_classes < 2 {
            return Err(CtmError::config("num_classes must be at least 2"));
        }
        if self.ctm_reduction == 0 {
            return Err(CtmError::config("ctm_reduction must be positive"));
        }
        for &(s, p) in &self.ctm_plan {
            if s >= stages || p > self.stage_depths[s] {
                return Err(CtmError::config(format!(
                    "ctm_plan entry ({s}, {p}) does not exist: need stage < {stages} and position <= depth of that stage"
                )));
            }
        }
        for slot in self.slots() {
            if let Slot::Ctm { stage, index, input } = slot {
                if reduced_channels(input.channels, self.ctm_reduction).is_err() {
                    return Err(CtmError::config(format!(
                        "ctm_plan entry ({stage}, {index}): reduction {} does not divide {} channels",
                        self.ctm_reduction, input.channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Feature shape after the stem.
    pub fn stem_output(&self) -> FeatureShape {
        FeatureShape {
            channels: self.stage_channels[0],
            h: self.input_spatial.0 / 2,
            w: self.input_spatial.1 / 2,
        }
    }

    /// The unit sequence, stage by stage. Stage 0 keeps the stem resolution;
    /// every later stage halves it in its first bottleneck. CTM blocks at the
    /// same position keep their plan order; `index` of a CTM slot is its
    /// position.
    pub fn slots(&self) -> Vec<Slot> {
        let mut slots = Vec::new();
        let mut cur = self.stem_output();
        for (s, (&c_out, &depth)) in self.stage_channels.iter().zip(&self.stage_depths).enumerate() {
            for pos in 0..=depth {
                for &(ps, pp) in &self.ctm_plan {
                    if ps == s && pp == pos {
                        slots.push(Slot::Ctm {
                            stage: s,
                            index: pos,
                            input: cur,
                        });
                    }
                }
                if pos < depth {
                    let stride = if s > 0 && pos == 0 { 2 } else { 1 };
                    slots.push(Slot::Bottleneck {
                        stage: s,
                        index: pos,
                        input: cur,
                        out_channels: c_out,
                        stride,
                    });
                    cur = FeatureShape {
                        channels: c_out,
                        h: (cur.h - 1) / stride + 1,
                        w: (cur.w - 1) / stride + 1,
                    };
                }
            }
        }
        slots
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = INPUT_CHANNELS * 9 * self.stage_channels[0] + 2 * self.stage_channels[0];
        for slot in self.slots() {
            total += match slot {
                Slot::Bottleneck {
                    input,
                    out_channels: co,
                    stride,
                    ..
                } => {
                    let ci = input.channels;
                    let mid = co / 4;
                    let mut n = ci * mid + 2 * mid + 9 * mid * mid + 2 * mid + mid * co + 2 * co;
                    if ci != co || stride != 1 {
                        n += ci * co + 2 * co;
                    }
                    n
                }
                Slot::Ctm { input, .. } => ctm_param_count(
                    input.channels,
                    input.channels / self.ctm_reduction,
                    input.h,
                    input.w,
                    self.ctm_variant,
                ),
            };
        }
        let last = *self.stage_channels.last().expect("non-empty");
        total + last * self.num_classes + self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    Bottleneck(Bottleneck),
    Ctm(CtmBlock),
}

#[derive(Debug, Clone)]
enum UnitCache {
    Bottleneck(BottleneckCache),
    Ctm(CtmCache),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    pub stem_conv: Conv2d,
    pub stem_bn: BatchNorm,
    /// Units in evaluation order, tagged with their parameter-name prefix.
    pub units: Vec<(String, Unit)>,
    pub head: Linear,
}

/// Activations of a training forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    n: usize,
    t: usize,
    frames: Tensor,
    stem_z: Tensor,
    stem_a: Tensor,
    stem_r_shape: Vec<usize>,
    stem_stats: Option<BnStats>,
    units: Vec<UnitCache>,
    feat_shape: Vec<usize>,
    pooled: Tensor,
}

/// Builds a network. The CTM blocks draw from a stream forked off `rng` before
/// anything else, so a baseline built from the same seed shares every
/// backbone weight with its CTM counterpart.
pub fn build_network(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
    cfg.validate()?;
    let mut ctm_rng = rng.fork();
    let stem = cfg.stem_output();
    let stem_conv = Conv2d::random(INPUT_CHANNELS, stem.channels, 3, 1, 1, rng);
    let stem_bn = BatchNorm::new(stem.channels);
    let mut units = Vec::new();
    let mut ctm_seen = vec![0usize; cfg.stage_channels.len()];
    for slot in cfg.slots() {
        match slot {
            Slot::Bottleneck {
                stage,
                index,
                input,
                out_channels,
                stride,
            } => units.push((
                format!("stage{stage}.block{index}"),
                Unit::Bottleneck(Bottleneck::random(input.channels, out_channels, stride, rng)),
            )),
            Slot::Ctm { stage, index: _, input } => {
                let block = CtmBlock::new(
                    input.channels,
                    cfg.ctm_reduction,
                    (input.h, input.w),
                    cfg.ctm_variant,
                    &mut ctm_rng,
                )?;
                units.push((format!("stage{stage}.ctm{}", ctm_seen[stage]), Unit::Ctm(block)));
                ctm_seen[stage] += 1;
            }
        }
    }
    let last = *cfg.stage_channels.last().expect("validated");
    let head = Linear::random(last, cfg.num_classes, HEAD_INIT_SCALE, rng);
    Ok(Network {
        config: cfg.clone(),
        stem_conv,
        stem_bn,
        units,
        head,
    })
}

/// `mean_t frame_logits[n*T + t, k]`, summing each column in ascending order so
/// the result does not depend on frame order.
fn temporal_mean(frame_logits: &Tensor, n: usize, t: usize) -> Tensor {
    let k = frame_logits.shape()[1];
    let d = frame_logits.data();
    let mut out = Tensor::zeros(&[n, k]);
    let mut column = vec![0.0; t];
    for b in 0..n {
        for c in 0..k {
            for (tt, v) in column.iter_mut().enumerate() {
                *v = d[(b * t + tt) * k + c];
            }
            column.sort_by(f64::total_cmp);
            out.data_mut()[b * k + c] = column.iter().sum::<f64>() / t as f64;
        }
    }
    out
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn ctm_blocks(&self) -> impl Iterator<Item = &CtmBlock> {
        self.units.iter().filter_map(|(_, u)| match u {
            Unit::Ctm(b) => Some(b),
            Unit::Bottleneck(_) => None,
        })
    }

    pub fn ctm_blocks_mut(&mut self) -> impl Iterator<Item = &mut CtmBlock> {
        self.units.iter_mut().filter_map(|(_, u)| match u {
            Unit::Ctm(b) => Some(b),
            Unit::Bottleneck(_) => None,
        })
    }

    /// The same backbone with every CTM block removed.
    pub fn strip_ctm(&self) -> Network {
        Network {
            config: self.config.baseline(),
            stem_conv: self.stem_conv.clone(),
            stem_bn: self.stem_bn.clone(),
            units: self
                .units
                .iter()
                .filter(|(_, u)| matches!(u, Unit::Bottleneck(_)))
                .cloned()
                .collect(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, clips: &Tensor) -> Result<(usize, usize)> {
        let s = clips.shape();
        let (h, w) = self.config.input_spatial;
        if s.len() != 5 || s[2] != INPUT_CHANNELS {
            return Err(CtmError::invalid(format!(
                "network expects clips shaped (N, T, {INPUT_CHANNELS}, H, W), got {s:?}"
            )));
        }
        if (s[3], s[4]) != (h, w) {
            return Err(CtmError::invalid(format!(
                "network input is {}x{}, configured for {h}x{w}",
                s[3], s[4]
            )));
        }
        if s[0] == 0 || s[1] == 0 {
            return Err(CtmError::invalid("network input has an empty batch or clip"));
        }
        Ok((s[0], s[1]))
    }

    /// Clip logits `(N, num_classes)`.
    pub fn forward(&self, clips: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_cached(clips, mode)?.0)
    }

    pub fn forward_cached(&self, clips: &Tensor, mode: Mode) -> Result<(Tensor, NetCache)> {
        let (n, t) = self.check_input(clips)?;
        let (h, w) = self.config.input_spatial;
        let frames = clips.reshape(&[n * t, INPUT_CHANNELS, h, w])?;
        let stem_z = self.stem_conv.forward(&frames)?;
        let (stem_a, stem_stats) = self.stem_bn.forward(&stem_z, mode)?;
        let stem_r = relu_forward(&stem_a);
        let stem_r_shape = stem_r.shape().to_vec();
        let mut x = avg_pool2_forward(&stem_r)?;
        let mut caches = Vec::with_capacity(self.units.len());
        for (_, unit) in &self.units {
            match unit {
                Unit::Bottleneck(b) => {
                    let (y, c) = b.forward_cached(&x, mode)?;
                    caches.push(UnitCache::Bottleneck(c));
                    x = y;
                }
                Unit::Ctm(b) => {
                    let s = x.shape().to_vec();
                    let clip = x.into_reshape(&[n, t, s[1], s[2], s[3]])?;
                    let (y, c) = b.forward_cached(&clip, mode)?;
                    caches.push(UnitCache::Ctm(c));
                    x = y.into_reshape(&s)?;
                }
            }
        }
        let feat_shape = x.shape().to_vec();
        let pooled = global_avg_pool_forward(&x)?;
        let frame_logits = self.head.forward(&pooled)?;
        let logits = temporal_mean(&frame_logits, n, t);
        let cache = NetCache {
            n,
            t,
            frames,
            stem_z,
            stem_a,
            stem_r_shape,
            stem_stats,
            units: caches,
            feat_shape,
            pooled,
        };
        Ok((logits, cache))
    }

    /// Parameter gradients for `dL/dlogits`, as a network-shaped value.
    pub fn backward(&self, cache: &NetCache, d_logits: &Tensor, mode: Mode) -> Result<Network> {
        let (n, t) = (cache.n, cache.t);
        let k = self.config.num_classes;
        if d_logits.shape() != [n, k] {
            return Err(CtmError::invalid(format!(
                "logit gradient has shape {:?}, expected [{n}, {k}]",
                d_logits.shape()
            )));
        }
        let inv_t = 1.0 / t as f64;
        let d_frame = Tensor::from_fn(&[n * t, k], |i| d_logits.data()[(i[0] / t) * k + i[1]] * inv_t);
        let (d_pooled, head) = self.head.backward(&cache.pooled, &d_frame)?;
        let mut dx = global_avg_pool_backward(&cache.feat_shape, &d_pooled)?;
        let mut unit_grads = Vec::with_capacity(self.units.len());
        for ((name, unit), c) in self.units.iter().zip(&cache.units).rev() {
            match (unit, c) {
                (Unit::Bottleneck(b), UnitCache::Bottleneck(c)) => {
                    let (d, g) = b.backward(c, &dx, mode)?;
                    unit_grads.push((name.clone(), Unit::Bottleneck(g)));
                    dx = d;
                }
                (Unit::Ctm(b), UnitCache::Ctm(c)) => {
                    let s = dx.shape().to_vec();
                    let d_clip = dx.into_reshape(&[n, t, s[1], s[2], s[3]])?;
                    let (d, g) = b.backward_cached(c, &d_clip, mode)?;
                    unit_grads.push((name.clone(), Unit::Ctm(g)));
                    dx = d.into_reshape(&s)?;
                }
                _ => return Err(CtmError::invalid("cache does not belong to this network")),
            }
        }
        unit_grads.reverse();
        let d_r = avg_pool2_backward(&cache.stem_r_shape, &dx)?;
        let d_a = relu_backward(&cache.stem_a, &d_r)?;
        let (d_z, stem_bn) = self.stem_bn.backward(&cache.stem_z, &d_a, mode)?;
        let (_, stem_conv) = self.stem_conv.backward(&cache.frames, &d_z)?;
        Ok(Network {
            config: self.config.clone(),
            stem_conv,
            stem_bn,
            units: unit_grads,
            head,
        })
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn commit(&mut self, cache: &NetCache) {
        if let Some(s) = &cache.stem_stats {
            self.stem_bn.update_running(s);
        }
        for ((_, unit), c) in self.units.iter_mut().zip(&cache.units) {
            match (unit, c) {
                (Unit::Bottleneck(b), UnitCache::Bottleneck(c)) => b.commit(c),
                (Unit::Ctm(b), UnitCache::Ctm(c)) => b.commit(c),
                _ => {}
            }
        }
    }
}

impl Module for Network {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.stem_conv.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (name, unit) in &self.units {
            let p = join(prefix, name);
            match unit {
                Unit::Bottleneck(b) => b.visit(&p, f),
                Unit::Ctm(b) => b.visit(&p, f),
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        self.stem_conv.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (name, unit) in &mut self.units {
            let p = join(prefix, name);
            match unit {
                Unit::Bottleneck(b) => b.visit_mut(&p, f),
                Unit::Ctm(b) => b.visit_mut(&p, f),
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
