//! Experiment matrix: path variants, insertion stage, block count.

use serde::{Deserialize, Serialize};

use super::{evaluate, gen_dataset, train, ClipSet, SyntheticSpec, TrainConfig};
use crate::ctm::CtmVariant;
use crate::error::{CtmError, Result};
use crate::network::{build_network, NetworkConfig};
use crate::params::count_params;
use crate::rng::Rng;

pub const ABLATION_CSV_HEADER: &str = "table,variant,params,val_top1,per_seed";

fn default_variants() -> Vec<String> {
    ["baseline", "path1_only", "path2_only", "full"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    /// Backbone and the CTM plan used by the variant table.
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: SyntheticSpec,
    pub seeds: Vec<u64>,
    /// Any of `baseline`, `full`, `path1_only`, `path2_only`.
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    /// One full CTM block per stage, after its second-to-last bottleneck.
    #[serde(default)]
    pub stage_sweep: bool,
    /// Block counts placed in `count_sweep_stage`.
    #[serde(default)]
    pub count_sweep: Vec<usize>,
    /// Defaults to the second-to-last stage.
    #[serde(default)]
    pub count_sweep_stage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub table: String,
    pub variant: String,
    pub params: usize,
    pub per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len().max(1) as f64
    }

    pub fn csv_line(&self) -> String {
        let seeds: Vec<String> = self.per_seed.iter().map(|v| format!("{v:.4}")).collect();
        format!(
            "{},{},{},{:.4},{}",
            self.table,
            self.variant,
            self.params,
            self.mean(),
            seeds.join(";")
        )
    }
}

/// Positions for `count` blocks in a stage of `depth` bottlenecks: after every
/// other bottleneck (1, 3, 5, ...) when that fits, otherwise after each of the
/// first `count`.
pub fn count_sweep_positions(count: usize, depth: usize) -> Result<Vec<usize>> {
    if count == 0 || count > depth {
        return Err(CtmError::config(format!(
            "cannot place {count} CTM blocks in a stage of depth {depth}"
        )));
    }
    if 2 * count - 1 <= depth {
        Ok((0..count).map(|i| 2 * i + 1).collect())
    } else {
        Ok((1..=count).collect())
    }
}

impl AblationMatrix {
    /// Every `(table, label, network config)` the matrix trains.
    pub fn experiments(&self) -> Result<Vec<(String, String, NetworkConfig)>> {
        let base = &self.network;
        let mut out = Vec::new();
        for v in &self.variants {
            let cfg = if v == "baseline" {
                base.baseline()
            } else {
                NetworkConfig {
                    ctm_variant: v.parse::<CtmVariant>()?,
                    ..base.clone()
                }
            };
            out.push(("variants".to_string(), v.clone(), cfg));
        }
        if self.stage_sweep {
            for (s, &d) in base.stage_depths.iter().enumerate() {
                let cfg = NetworkConfig {
                    ctm_plan: vec![(s, d.saturating_sub(1))],
                    ctm_variant: CtmVariant::Full,
                    ..base.clone()
                };
                out.push(("stages".to_string(), format!("stage{s}"), cfg));
            }
        }
        if !self.count_sweep.is_empty() {
            let stages = base.stage_depths.len();
            let s = self.count_sweep_stage.unwrap_or(stages.saturating_sub(2));
            let depth = *base
                .stage_depths
                .get(s)
                .ok_or_else(|| CtmError::config(format!("count_sweep_stage {s} does not exist")))?;
            for &n in &self.count_sweep {
                let cfg = NetworkConfig {
                    ctm_plan: count_sweep_positions(n, depth)?.into_iter().map(|p| (s, p)).collect(),
                    ctm_variant: CtmVariant::Full,
                    ..base.clone()
                };
                out.push(("counts".to_string(), format!("{n}_blocks"), cfg));
            }
        }
        for (_, label, cfg) in &out {
            cfg.validate()
                .map_err(|e| CtmError::config(format!("experiment '{label}': {e}")))?;
        }
        Ok(out)
    }
}

/// Trains one network per `(experiment, seed)` on a shared dataset. Seed `s`
/// initializes the network and orders the batches.
pub fn run_ablation(matrix: &AblationMatrix, progress: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    if matrix.seeds.is_empty() {
        return Err(CtmError::config("ablation needs at least one seed"));
    }
    let experiments = matrix.experiments()?;
    let (train_set, val_set): (ClipSet, ClipSet) = gen_dataset(&matrix.data, &mut Rng::new(matrix.data.sample_seed))?;
    let mut rows = Vec::new();
    for (table, label, cfg) in experiments {
        let mut row = AblationRow {
            table,
            variant: label,
            params: cfg.param_count(),
            per_seed: Vec::new(),
        };
        for &seed in &matrix.seeds {
            let mut net = build_network(&cfg, &mut Rng::new(seed))?;
            row.params = count_params(&net);
            let tc = TrainConfig {
                seed,
                ..matrix.train.clone()
            };
            let log = train(&mut net, &train_set, &val_set, &tc, None)?;
            let acc = evaluate(&net, &val_set)?;
            progress(&format!("{} {} seed {seed}: val_top1 {acc:.4}", row.table, row.variant));
            debug_assert_eq!(acc, log.final_val_top1());
            row.per_seed.push(acc);
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_positions() {
        assert_eq!(count_sweep_positions(1, 6).unwrap(), vec![1]);
        assert_eq!(count_sweep_positions(3, 6).unwrap(), vec![1, 3, 5]);
        assert_eq!(count_sweep_positions(6, 6).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert!(count_sweep_positions(7, 6).is_err());
    }

    #[test]
    fn matrix_expands_tables() {
        let m = AblationMatrix {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            seeds: vec![0],
            variants: default_variants(),
            stage_sweep: true,
            count_sweep: vec![1, 3, 6],
            count_sweep_stage: None,
        };
        let ex = m.experiments().unwrap();
        assert_eq!(ex.len(), 4 + 4 + 3);
        assert!(ex[0].2.ctm_plan.is_empty());
        assert_eq!(ex[4 + 4 + 1].2.ctm_plan, vec![(2, 1), (2, 3), (2, 5)]);
        assert_eq!(ex[4].2.ctm_plan, vec![(0, 1)]);
    }

    #[test]
    fn unknown_variant_rejected() {
        let json = r#"{"network":{"stage_channels":[8],"stage_depths":[1],"input_spatial":[4,4],
            "num_classes":2,"ctm_plan":[[0,1]],"ctm_reduction":2},"seeds":[0],"variants":["both"]}"#;
        let m: AblationMatrix = serde_json::from_str(json).unwrap();
        assert!(m.experiments().is_err());
    }
}
