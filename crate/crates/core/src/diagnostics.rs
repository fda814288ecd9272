//! Self-checks exposed by the CLI: oracle equivalence, identity at init,
//! finite-difference gradients and the TCC micro-benchmark.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::ctm::{CtmBlock, CtmVariant};
use crate::error::{CtmError, Result};
use crate::gradcheck::{check_input, check_module, probe_indices, GradReport};
use crate::layers::{BatchNorm, Conv1x1, Mode, TemporalConv3};
use crate::network::{build_network, Network, NetworkConfig};
use crate::params::{Module, ParamKind};
use crate::rng::{randn, Rng};
use crate::tcc::{tcc_backward, tcc_forward_fast, tcc_forward_naive, PaddingPolicy, TccKernel};
use crate::tensor::Tensor;
use crate::train::softmax_cross_entropy;

pub const ORACLE_TOL: f64 = 1e-12;
pub const LAYER_GRAD_TOL: f64 = 1e-6;
pub const COMPOSITE_GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub shape: [usize; 5],
    pub trials: usize,
    pub max_abs_diff: f64,
}

/// Fast vs naive TCC over the `T x C x H x W x N` grid, `trials` random draws each.
pub fn oracle_check(trials: usize, rng: &mut Rng) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for t in [2, 4, 8] {
        for c in [1, 3, 16] {
            for h in [1, 2, 7] {
                for w in [1, 2, 7] {
                    for n in [1, 2] {
                        let mut worst: f64 = 0.0;
                        for _ in 0..trials {
                            let f = randn(&[n, t, c, h, w], rng, 1.0)?;
                            let k = TccKernel::random(h, w, rng);
                            let pad = PaddingPolicy::default();
                            let d = tcc_forward_fast(&f, &k, pad)?.max_abs_diff(&tcc_forward_naive(&f, &k, pad)?)?;
                            worst = worst.max(d);
                        }
                        rows.push(OracleRow {
                            shape: [n, t, c, h, w],
                            trials,
                            max_abs_diff: worst,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub blocks: usize,
    /// Largest `|ctm(x) - x|` over all blocks, inference mode.
    pub max_eval_diff: f64,
    /// Same in training mode.
    pub max_train_diff: f64,
    /// `|loss(ctm network) - loss(baseline)|` on one batch, training mode.
    pub loss_diff: f64,
}

/// A small network configuration with CTM blocks in two stages.
pub fn probe_network_config() -> NetworkConfig {
    NetworkConfig {
        stage_channels: vec![8, 16],
        stage_depths: vec![2, 2],
        input_spatial: (8, 8),
        num_classes: 4,
        ctm_plan: vec![(0, 1), (1, 1), (1, 2)],
        ctm_reduction: 4,
        ctm_variant: CtmVariant::Full,
    }
}

pub fn identity_check(blocks: usize, rng: &mut Rng) -> Result<IdentityReport> {
    let mut report = IdentityReport {
        blocks,
        max_eval_diff: 0.0,
        max_train_diff: 0.0,
        loss_diff: 0.0,
    };
    for _ in 0..blocks {
        let c2 = 1 + rng.below(4);
        let red = 1 + rng.below(4);
        let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
        let (n, t) = (1 + rng.below(2), 2 + rng.below(5));
        let block = CtmBlock::new(c2 * red, red, (h, w), CtmVariant::Full, rng)?;
        let scale = 1.0 + 4.0 * rng.uniform();
        let x = randn(&[n, t, c2 * red, h, w], rng, scale)?;
        report.max_eval_diff = report.max_eval_diff.max(block.forward(&x, Mode::Eval)?.max_abs_diff(&x)?);
        report.max_train_diff = report.max_train_diff.max(block.forward(&x, Mode::Train)?.max_abs_diff(&x)?);
    }
    let cfg = probe_network_config();
    let seed = rng.next_u64();
    let ctm = build_network(&cfg, &mut Rng::new(seed))?;
    let base = build_network(&cfg.baseline(), &mut Rng::new(seed))?;
    let x = randn(&[4, 4, 3, 8, 8], rng, 1.0)?;
    let labels = [0, 1, 2, 3];
    let l_ctm = softmax_cross_entropy(&ctm.forward(&x, Mode::Train)?, &labels)?.0;
    let l_base = softmax_cross_entropy(&base.forward(&x, Mode::Train)?, &labels)?.0;
    report.loss_diff = (l_ctm - l_base).abs();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Tcc,
    Conv1x1,
    BatchNorm,
    TemporalConv,
    Block,
    Network,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        GradTarget::Tcc,
        GradTarget::Conv1x1,
        GradTarget::BatchNorm,
        GradTarget::TemporalConv,
        GradTarget::Block,
        GradTarget::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Tcc => "tcc",
            GradTarget::Conv1x1 => "conv1x1",
            GradTarget::BatchNorm => "bn",
            GradTarget::TemporalConv => "tconv",
            GradTarget::Block => "block",
            GradTarget::Network => "net",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradTarget::Block | GradTarget::Network => COMPOSITE_GRAD_TOL,
            _ => LAYER_GRAD_TOL,
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = CtmError;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CtmError::invalid(format!("unknown gradcheck module '{s}'")))
    }
}

/// Sets every batch-norm scale and shift to random values so that every
/// parameter behind a zero-scale norm receives gradient.
pub fn randomize_norms<M: Module>(m: &mut M, rng: &mut Rng) {
    m.visit_mut("", &mut |name, t, kind| {
        if kind != ParamKind::Norm {
            return;
        }
        if name.ends_with("gamma") {
            for v in t.data_mut() {
                *v = 0.5 + rng.uniform();
            }
        } else {
            *t = randn(t.shape(), rng, 0.2).expect("positive scale");
        }
    });
}

/// `<y - y0, r>`: same gradient as `<y, r>`, but the unperturbed part cancels
/// exactly instead of leaving summation noise in the difference quotient.
fn probe_loss(y: &Tensor, y0: &Tensor, r: &Tensor) -> f64 {
    y.sub(y0).unwrap().dot(r).unwrap()
}

/// Finite-difference reports for one target, on `(2, 3, 8, 4, 4)`-sized inputs.
pub fn gradcheck(target: GradTarget, rng: &mut Rng) -> Result<Vec<GradReport>> {
    let shape = [2, 3, 8, 4, 4];
    let mut reports = Vec::new();
    match target {
        GradTarget::Tcc => {
            let f = randn(&shape, rng, 1.0)?;
            let k = TccKernel::random(4, 4, rng);
            let r = randn(&shape, rng, 1.0)?;
            let pad = PaddingPolicy::default();
            let y0 = tcc_forward_fast(&f, &k, pad)?;
            let loss = |f: &Tensor, k: &TccKernel| probe_loss(&tcc_forward_fast(f, k, pad).unwrap(), &y0, &r);
            let (df, dk) = tcc_backward(&f, &k, &r, pad)?;
            let idx = probe_indices(f.len(), None, rng);
            reports.push(check_input("input", &f, &df, &idx, |p| loss(p, &k)));
            reports.extend(check_module(&k, &TccKernel::new(dk, (4, 4))?, None, rng, |k| loss(&f, k)));
        }
        GradTarget::Conv1x1 => {
            let x = randn(&shape, rng, 1.0)?;
            let layer = Conv1x1::new(randn(&[5, 8], rng, 0.5)?, Some(randn(&[5], rng, 0.5)?))?;
            let y = layer.forward(&x)?;
            let r = randn(y.shape(), rng, 1.0)?;
            let loss = |l: &Conv1x1, x: &Tensor| probe_loss(&l.forward(x).unwrap(), &y, &r);
            let (dx, g) = layer.backward(&x, &r)?;
            let idx = probe_indices(x.len(), None, rng);
            reports.push(check_input("input", &x, &dx, &idx, |p| loss(&layer, p)));
            reports.extend(check_module(&layer, &g, None, rng, |l| loss(l, &x)));
        }
        GradTarget::BatchNorm => {
            let x = randn(&shape, rng, 2.0)?;
            let mut bn = BatchNorm::new(8);
            randomize_norms(&mut bn, rng);
            let r = randn(&shape, rng, 1.0)?;
            for mode in [Mode::Train, Mode::Eval] {
                let y0 = bn.forward(&x, mode)?.0;
                let loss = |b: &BatchNorm, x: &Tensor| probe_loss(&b.forward(x, mode).unwrap().0, &y0, &r);
                let (dx, g) = bn.backward(&x, &r, mode)?;
                let idx = probe_indices(x.len(), None, rng);
                let tag = if mode == Mode::Train { "train" } else { "eval" };
                reports.push(check_input(&format!("{tag}.input"), &x, &dx, &idx, |p| loss(&bn, p)));
                for mut rep in check_module(&bn, &g, None, rng, |b| loss(b, &x)) {
                    rep.name = format!("{tag}.{}", rep.name);
                    reports.push(rep);
                }
            }
        }
        GradTarget::TemporalConv => {
            // (N, C, T, H, W) layout
            let x = randn(&[2, 8, 3, 4, 4], rng, 1.0)?;
            let layer = TemporalConv3::random(8, 6, rng);
            let y = layer.forward(&x)?;
            let r = randn(y.shape(), rng, 1.0)?;
            let loss = |l: &TemporalConv3, x: &Tensor| probe_loss(&l.forward(x).unwrap(), &y, &r);
            let (dx, g) = layer.backward(&x, &r)?;
            let idx = probe_indices(x.len(), None, rng);
            reports.push(check_input("input", &x, &dx, &idx, |p| loss(&layer, p)));
            reports.extend(check_module(&layer, &g, None, rng, |l| loss(l, &x)));
        }
        GradTarget::Block => {
            let mut block = CtmBlock::new(8, 4, (2, 2), CtmVariant::Full, rng)?;
            randomize_norms(&mut block, rng);
            let x = randn(&[1, 3, 8, 2, 2], rng, 1.0)?;
            let r = randn(x.shape(), rng, 1.0)?;
            for mode in [Mode::Train, Mode::Eval] {
                let y0 = block.forward(&x, mode)?;
                let loss = |b: &CtmBlock, x: &Tensor| probe_loss(&b.forward(x, mode).unwrap(), &y0, &r);
                let (dx, g) = block.backward(&x, &r, mode)?;
                let idx = probe_indices(x.len(), None, rng);
                let tag = if mode == Mode::Train { "train" } else { "eval" };
                reports.push(check_input(&format!("{tag}.input"), &x, &dx, &idx, |p| loss(&block, p)));
                for mut rep in check_module(&block, &g, None, rng, |b| loss(b, &x)) {
                    rep.name = format!("{tag}.{}", rep.name);
                    reports.push(rep);
                }
            }
        }
        GradTarget::Network => {
            let cfg = NetworkConfig {
                stage_channels: vec![8, 8],
                stage_depths: vec![1, 1],
                input_spatial: (4, 4),
                num_classes: 3,
                ctm_plan: vec![(0, 1), (1, 1)],
                ctm_reduction: 4,
                ctm_variant: CtmVariant::Full,
            };
            let mut net = build_network(&cfg, rng)?;
            for b in net.ctm_blocks_mut() {
                randomize_norms(b, rng);
            }
            let x = randn(&[2, 3, 3, 4, 4], rng, 1.0)?;
            let labels = [0, 2];
            let loss = |n: &Network| {
                let logits = n.forward(&x, Mode::Train).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0
            };
            let (logits, cache) = net.forward_cached(&x, Mode::Train)?;
            let (_, d_logits) = softmax_cross_entropy(&logits, &labels)?;
            let g = net.backward(&cache, &d_logits, Mode::Train)?;
            reports.extend(check_module(&net, &g, Some(8), rng, loss));
        }
    }
    Ok(reports)
}

pub const BENCH_RUNS: usize = 20;
pub const BENCH_CSV_HEADER: &str = "shape,variant,median_ns,checksum,speedup_vs_naive";

/// Parses one bench shape line: `N,T,C,H,W` or `T,C,H,W` (N = 1).
pub fn parse_shape_line(line: &str) -> Result<[usize; 5]> {
    let dims: Vec<usize> = line
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CtmError::invalid(format!("bad shape line '{line}'")))?;
    match dims.as_slice() {
        &[n, t, c, h, w] => Ok([n, t, c, h, w]),
        &[t, c, h, w] => Ok([1, t, c, h, w]),
        _ => Err(CtmError::invalid(format!(
            "shape line '{line}' needs 4 (T,C,H,W) or 5 (N,T,C,H,W) values"
        ))),
    }
    .and_then(|s| {
        if s.contains(&0) {
            Err(CtmError::invalid(format!("shape line '{line}' has a zero extent")))
        } else {
            Ok(s)
        }
    })
}

/// Blank lines and `#` comments are skipped.
pub fn parse_shapes(text: &str) -> Result<Vec<[usize; 5]>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(parse_shape_line)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub shape: [usize; 5],
    pub variant: &'static str,
    pub median_ns: u128,
    pub checksum: f64,
    pub speedup_vs_naive: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let s = self.shape;
        format!(
            "{}x{}x{}x{}x{},{},{},{:.6e},{:.3}",
            s[0], s[1], s[2], s[3], s[4], self.variant, self.median_ns, self.checksum, self.speedup_vs_naive
        )
    }
}

fn median_ns(runs: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<(u128, Tensor)> {
    let mut times = Vec::with_capacity(runs);
    let mut last = None;
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        let out = f()?;
        times.push(start.elapsed().as_nanos());
        last = Some(out);
    }
    times.sort_unstable();
    Ok((times[times.len() / 2], last.expect("at least one run")))
}

/// Median wall time of the naive and fast forward passes on one shape.
pub fn bench_shape(shape: [usize; 5], runs: usize, rng: &mut Rng) -> Result<[BenchRow; 2]> {
    let [_, _, _, h, w] = shape;
    let f = randn(&shape, rng, 1.0)?;
    let k = TccKernel::random(h, w, rng);
    let pad = PaddingPolicy::default();
    let (naive_ns, naive_out) = median_ns(runs, || tcc_forward_naive(&f, &k, pad))?;
    let (fast_ns, fast_out) = median_ns(runs, || tcc_forward_fast(&f, &k, pad))?;
    Ok([
        BenchRow {
            shape,
            variant: "naive",
            median_ns: naive_ns,
            checksum: naive_out.sum(),
            speedup_vs_naive: 1.0,
        },
        BenchRow {
            shape,
            variant: "fast",
            median_ns: fast_ns,
            checksum: fast_out.sum(),
            speedup_vs_naive: naive_ns as f64 / fast_ns.max(1) as f64,
        },
    ])
}
