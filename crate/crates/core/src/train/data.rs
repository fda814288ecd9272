//! Synthetic temporal-order clips.
//!
//! A library of `T` spatial motifs is drawn once. Every clip of class `k` shows
//! all `T` motifs, once each, in the order `perm_k`, plus per-pixel Gaussian
//! noise. Class 0 plays the motifs in order, class 1 reversed, further classes
//! use distinct random orders. Per-frame content is therefore identical in
//! distribution across classes; only the order differs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CtmError, Result};
use crate::network::INPUT_CHANNELS;
use crate::rng::{randn, Rng};
use crate::tensor::{read_exact, read_u32, read_u64, Tensor};

pub const DATA_MAGIC: &[u8; 8] = b"CTMDATA\0";
pub const DATA_VERSION: u32 = 1;
pub const TRAIN_FILE: &str = "train.ctmdata";
pub const VAL_FILE: &str = "val.ctmdata";

/// Side of the coarse grid each motif is drawn on before upsampling.
const MOTIF_GRID: usize = 4;

fn default_sample_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_clips_per_class: usize,
    pub val_clips_per_class: usize,
    pub clip_len: usize,
    pub spatial: (usize, usize),
    pub motif_library_seed: u64,
    pub noise_sigma: f64,
    /// Seed of the per-clip noise (the motifs come from `motif_library_seed`).
    #[serde(default = "default_sample_seed")]
    pub sample_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_clips_per_class: 200,
            val_clips_per_class: 50,
            clip_len: 8,
            spatial: (32, 32),
            motif_library_seed: 7,
            noise_sigma: 0.5,
            sample_seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CtmError::config("num_classes must be at least 2"));
        }
        if self.clip_len < 2 {
            return Err(CtmError::config("clip_len must be at least 2"));
        }
        if self.clip_len < self.num_classes {
            return Err(CtmError::config(format!(
                "{} classes need clip_len >= num_classes, got clip_len {}",
                self.num_classes, self.clip_len
            )));
        }
        if self.spatial.0 == 0 || self.spatial.1 == 0 {
            return Err(CtmError::config("spatial extent must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CtmError::config("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

/// Labelled clips, each `(T, 3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSet {
    pub clips: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ClipSet {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Stacks the selected clips into `(B, T, 3, H, W)`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let first = self
            .clips
            .get(*indices.first().ok_or_else(|| CtmError::invalid("empty batch"))?)
            .ok_or_else(|| CtmError::invalid("batch index out of range"))?;
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let clip = self.clips.get(i).ok_or_else(|| CtmError::invalid("batch index out of range"))?;
            if clip.shape() != first.shape() {
                return Err(CtmError::invalid("clips in a batch must share a shape"));
            }
            data.extend_from_slice(clip.data());
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, spec: &SyntheticSpec) -> Result<()> {
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let json = spec.to_json();
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        for (clip, &label) in self.clips.iter().zip(&self.labels) {
            clip.write_to(w)?;
            let label = u16::try_from(label).map_err(|_| CtmError::invalid("label exceeds u16"))?;
            w.write_all(&label.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(ClipSet, SyntheticSpec)> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "data magic")?;
        if &magic != DATA_MAGIC {
            return Err(CtmError::format("not a clip data file (bad magic)"));
        }
        let version = read_u32(r, "data version")?;
        if version != DATA_VERSION {
            return Err(CtmError::format(format!("unsupported data version {version}")));
        }
        let count = read_u64(r, "clip count")?;
        let json_len = read_u32(r, "spec length")?;
        if json_len > 1 << 20 {
            return Err(CtmError::format("spec length is implausible"));
        }
        let mut json = vec![0u8; json_len as usize];
        read_exact(r, &mut json, "spec")?;
        let spec: SyntheticSpec =
            serde_json::from_slice(&json).map_err(|e| CtmError::format(format!("data spec: {e}")))?;
        let mut set = ClipSet {
            clips: Vec::new(),
            labels: Vec::new(),
        };
        for _ in 0..count {
            let clip = Tensor::read_from(r)?;
            let mut b = [0u8; 2];
            read_exact(r, &mut b, "label")?;
            let label = u16::from_le_bytes(b) as usize;
            if label >= spec.num_classes {
                return Err(CtmError::format(format!("label {label} out of range")));
            }
            set.clips.push(clip);
            set.labels.push(label);
        }
        Ok((set, spec))
    }
}

/// The motif library: `T` unit-variance `(3, H, W)` frames.
pub fn motif_library(spec: &SyntheticSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.motif_library_seed);
    let (h, w) = spec.spatial;
    (0..spec.clip_len)
        .map(|_| {
            let coarse = randn(&[INPUT_CHANNELS, MOTIF_GRID, MOTIF_GRID], &mut rng, 1.0)?;
            let up = Tensor::from_fn(&[INPUT_CHANNELS, h, w], |i| {
                coarse.get(&[i[0], i[1] * MOTIF_GRID / h, i[2] * MOTIF_GRID / w])
            });
            let n = up.len() as f64;
            let mean = up.sum() / n;
            let var = up.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / var.sqrt().max(1e-12);
            Ok(up.map(|v| (v - mean) * inv))
        })
        .collect()
}

/// Frame orders, one per class.
pub fn class_orders(spec: &SyntheticSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let t = spec.clip_len;
    let mut orders: Vec<Vec<usize>> = vec![(0..t).collect(), (0..t).rev().collect()];
    let mut rng = Rng::new(spec.motif_library_seed ^ 0x9e37_79b9_7f4a_7c15);
    while orders.len() < spec.num_classes {
        let mut p: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut p);
        if !orders.contains(&p) {
            orders.push(p);
        }
    }
    orders.truncate(spec.num_classes);
    Ok(orders)
}

fn make_split(
    motifs: &[Tensor],
    orders: &[Vec<usize>],
    per_class: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<ClipSet> {
    let frame_shape = motifs[0].shape().to_vec();
    let frame_len = motifs[0].len();
    let t = orders[0].len();
    let mut set = ClipSet {
        clips: Vec::with_capacity(per_class * orders.len()),
        labels: Vec::with_capacity(per_class * orders.len()),
    };
    for _ in 0..per_class {
        for (label, order) in orders.iter().enumerate() {
            let mut data = Vec::with_capacity(t * frame_len);
            for &m in order {
                data.extend(motifs[m].data().iter().map(|&v| v + sigma * rng.normal()));
            }
            let mut shape = vec![t];
            shape.extend_from_slice(&frame_shape);
            set.clips.push(Tensor::new(shape, data)?);
            set.labels.push(label);
        }
    }
    Ok(set)
}

/// `(train, val)` splits, deterministic in `spec` and `rng`.
pub fn gen_dataset(spec: &SyntheticSpec, rng: &mut Rng) -> Result<(ClipSet, ClipSet)> {
    let motifs = motif_library(spec)?;
    let orders = class_orders(spec)?;
    let train = make_split(&motifs, &orders, spec.train_clips_per_class, spec.noise_sigma, rng)?;
    let val = make_split(&motifs, &orders, spec.val_clips_per_class, spec.noise_sigma, rng)?;
    Ok((train, val))
}

/// Generates both splits with the spec's own sample seed and writes them to `dir`.
pub fn write_dataset(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<(ClipSet, ClipSet)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (train, val) = gen_dataset(spec, &mut Rng::new(spec.sample_seed))?;
    for (set, name) in [(&train, TRAIN_FILE), (&val, VAL_FILE)] {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        set.write_to(&mut w, spec)?;
        w.flush()?;
    }
    Ok((train, val))
}

pub fn read_split(path: impl AsRef<Path>) -> Result<(ClipSet, SyntheticSpec)> {
    ClipSet::read_from(&mut BufReader::new(File::open(path)?))
}
