//! Synthetic data, optimizer, training loop and the ablation runner.

mod ablation;
mod data;
mod optim;

pub use ablation::{count_sweep_positions, run_ablation, AblationMatrix, AblationRow, ABLATION_CSV_HEADER};
pub use data::{
    class_orders, gen_dataset, motif_library, read_split, write_dataset, ClipSet, SyntheticSpec, DATA_MAGIC,
    DATA_VERSION, TRAIN_FILE, VAL_FILE,
};
pub use optim::{lr_at, sgd_step, TrainConfig};

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{CtmError, Result};
use crate::layers::Mode;
use crate::network::{save_checkpoint, Network};
use crate::params::zeros_like;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_CSV_HEADER: &str = "epoch,lr,train_loss,train_top1,val_top1";
/// Clips per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(CtmError::invalid(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(CtmError::invalid(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[y];
        for (c, g) in grad.data_mut()[b * k..(b + 1) * k].iter_mut().enumerate() {
            let p = (row[c] - max).exp() / z;
            *g = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(&logits.data()[b * k..(b + 1) * k]) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Inference-mode top-1 accuracy on `set`.
pub fn evaluate(net: &Network, set: &ClipSet) -> Result<f64> {
    if set.is_empty() {
        return Err(CtmError::invalid("cannot evaluate on an empty set"));
    }
    let mut hits = 0.0;
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(EVAL_BATCH) {
        let (x, labels) = set.batch(chunk)?;
        let logits = net.forward(&x, Mode::Eval)?;
        hits += top1(&logits, &labels) * labels.len() as f64;
    }
    Ok(hits / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    /// Validation accuracy before any update.
    pub initial_val_top1: f64,
    /// Loss of the first training batch, before any update.
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_val_top1: f64,
    /// 0 when no epoch beat the untrained network.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn final_val_top1(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_top1, |e| e.val_top1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_CSV_HEADER}\n0,,,,{}\n", self.initial_val_top1);
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.train_top1, e.val_top1
            ));
        }
        s
    }
}

fn check_compatible(net: &Network, set: &ClipSet) -> Result<()> {
    let cfg = net.config();
    for (clip, &label) in set.clips.iter().zip(&set.labels) {
        let s = clip.shape();
        if s.len() != 4 || (s[2], s[3]) != cfg.input_spatial {
            return Err(CtmError::invalid(format!(
                "clip shape {s:?} does not match network input {}x{}",
                cfg.input_spatial.0, cfg.input_spatial.1
            )));
        }
        if label >= cfg.num_classes {
            return Err(CtmError::invalid(format!(
                "label {label} exceeds the network's {} classes",
                cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// Trains `net` in place with momentum SGD. Batches are reshuffled every epoch
/// from `cfg.seed`. With `out_dir`, the best-validation checkpoint and the CSV
/// log are written there.
pub fn train(
    net: &mut Network,
    train_set: &ClipSet,
    val_set: &ClipSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CtmError::invalid("training set is empty"));
    }
    check_compatible(net, train_set)?;
    check_compatible(net, val_set)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut velocity = zeros_like(&*net);
    let initial_val_top1 = evaluate(net, val_set)?;
    let mut log = TrainLog {
        initial_val_top1,
        initial_loss: None,
        epochs: Vec::new(),
        best_val_top1: initial_val_top1,
        best_epoch: 0,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(net, dir.join(BEST_CHECKPOINT))?;
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch - 1, cfg);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut hit_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk)?;
            let (logits, cache) = net.forward_cached(&x, Mode::Train)?;
            let (loss, d_logits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(CtmError::Diverged { epoch, step, loss });
            }
            log.initial_loss.get_or_insert(loss);
            loss_sum += loss * labels.len() as f64;
            hit_sum += top1(&logits, &labels) * labels.len() as f64;
            let grads = net.backward(&cache, &d_logits, Mode::Train)?;
            net.commit(&cache);
            sgd_step(net, &grads, &mut velocity, cfg, lr);
            step += 1;
        }
        let val_top1 = evaluate(net, val_set)?;
        let n = train_set.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_top1: hit_sum / n,
            val_top1,
        });
        if val_top1 > log.best_val_top1 {
            log.best_val_top1 = val_top1;
            log.best_epoch = epoch;
            if let Some(dir) = out_dir {
                save_checkpoint(net, dir.join(BEST_CHECKPOINT))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::write(dir.join(LOG_FILE), log.to_csv())?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::CtmVariant;
    use crate::network::{build_network, NetworkConfig};

    #[test]
    fn cross_entropy_values_and_gradient() {
        let logits = Tensor::new([2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 2]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected = (3f64.ln() + (z.ln() - 3.0)) / 2.0;
        assert!((loss - expected).abs() < 1e-14);
        for b in 0..2 {
            let row_sum: f64 = grad.data()[b * 3..b * 3 + 3].iter().sum();
            assert!(row_sum.abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let constant = Tensor::zeros(&[4, 3]);
        assert_eq!(top1(&constant, &[0, 1, 0, 2]), 0.5);
        let oracle = Tensor::new([2, 2], vec![5.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(top1(&oracle, &[0, 1]), 1.0);
    }

    fn tiny_setup() -> (NetworkConfig, ClipSet, ClipSet) {
        let spec = SyntheticSpec {
            num_classes: 2,
            train_clips_per_class: 4,
            val_clips_per_class: 2,
            clip_len: 3,
            spatial: (4, 4),
            motif_library_seed: 3,
            noise_sigma: 0.2,
            sample_seed: 1,
        };
        let cfg = NetworkConfig {
            stage_channels: vec![4, 8],
            stage_depths: vec![1, 1],
            input_spatial: (4, 4),
            num_classes: 2,
            ctm_plan: vec![(0, 1)],
            ctm_reduction: 2,
            ctm_variant: CtmVariant::Full,
        };
        let (train, val) = gen_dataset(&spec, &mut Rng::new(1)).unwrap();
        (cfg, train, val)
    }

    #[test]
    fn zero_epochs_is_untrained_accuracy() {
        let (cfg, train_set, val) = tiny_setup();
        let mut net = build_network(&cfg, &mut Rng::new(0)).unwrap();
        let before = net.clone();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = train(&mut net, &train_set, &val, &tc, None).unwrap();
        assert_eq!(net, before);
        assert_eq!(log.final_val_top1(), evaluate(&before, &val).unwrap());
    }

    #[test]
    fn deterministic_logs_and_checkpoint() {
        let (cfg, train_set, val) = tiny_setup();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let run = |out: Option<&Path>| {
            let mut net = build_network(&cfg, &mut Rng::new(5)).unwrap();
            (train(&mut net, &train_set, &val, &tc, out).unwrap(), net)
        };
        let (a, net_a) = run(Some(dir.path()));
        let (b, net_b) = run(None);
        assert_eq!(a, b);
        assert_eq!(net_a, net_b);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        let csv = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert!(csv.starts_with(LOG_CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn divergence_aborts() {
        let (cfg, mut train_set, val) = tiny_setup();
        train_set.clips[0].data_mut()[0] = f64::NAN;
        let mut net = build_network(&cfg, &mut Rng::new(0)).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 100,
            ..TrainConfig::default()
        };
        let err = train(&mut net, &train_set, &val, &tc, None).unwrap_err();
        assert!(matches!(err, CtmError::Diverged { .. }), "{err}");
    }
}
