use crate::error::{CtmError, Result};
use crate::layers::{channel_layout, Mode};
use crate::params::{join, Module, ParamKind};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over every axis except the channel axis.
///
/// Running statistics follow `r <- (1 - momentum) r + momentum * batch`, with
/// the unbiased batch variance feeding `running_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch statistics from one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchNorm {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// `gamma = 0`: the layer outputs `beta` (zero) everywhere.
    pub fn zero_gamma(channels: usize) -> Self {
        let mut bn = Self::new(channels);
        bn.gamma.fill(0.0);
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (lead, c, sites) = channel_layout(x.shape())?;
        if c != self.channels() {
            return Err(CtmError::invalid(format!(
                "batch norm expects {} channels, got {c}",
                self.channels()
            )));
        }
        Ok((lead, sites))
    }

    pub fn batch_stats(&self, x: &Tensor) -> Result<BnStats> {
        let (lead, sites) = self.layout(x)?;
        let c = self.channels();
        let count = lead * sites;
        if count < 2 {
            return Err(CtmError::invalid(format!(
                "training-mode batch norm needs at least 2 samples per channel, got {count}"
            )));
        }
        let xd = x.data();
        let mut mean = vec![0.0; c];
        for l in 0..lead {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (l * c + ch) * sites;
                *m += xd[base..base + sites].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for l in 0..lead {
            for (ch, v) in var.iter_mut().enumerate() {
                let base = (l * c + ch) * sites;
                let m = mean[ch];
                *v += xd[base..base + sites].iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        Ok(BnStats { mean, var, count })
    }

    /// Per-channel `(mean, inv_std)` used by `mode`.
    fn moments(&self, x: &Tensor, mode: Mode) -> Result<(Vec<f64>, Vec<f64>, Option<BnStats>)> {
        match mode {
            Mode::Train => {
                let stats = self.batch_stats(x)?;
                let inv = stats.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                Ok((stats.mean.clone(), inv, Some(stats)))
            }
            Mode::Eval => {
                self.layout(x)?;
                let inv = self
                    .running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                Ok((self.running_mean.data().to_vec(), inv, None))
            }
        }
    }

    /// Pure forward. In training mode the batch statistics are returned so the
    /// caller can commit them with [`BatchNorm::update_running`].
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BnStats>)> {
        let (lead, sites) = self.layout(x)?;
        let c = self.channels();
        let (mean, inv, stats) = self.moments(x, mode)?;
        let mut out = Tensor::zeros(x.shape());
        let (xd, od) = (x.data(), out.data_mut());
        let (g, b) = (self.gamma.data(), self.beta.data());
        for l in 0..lead {
            for ch in 0..c {
                let base = (l * c + ch) * sites;
                let (m, s, gv, bv) = (mean[ch], inv[ch], g[ch], b[ch]);
                for (o, &v) in od[base..base + sites].iter_mut().zip(&xd[base..base + sites]) {
                    *o = gv * ((v - m) * s) + bv;
                }
            }
        }
        Ok((out, stats))
    }

    pub fn update_running(&mut self, stats: &BnStats) {
        let m = self.momentum;
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
    }

    /// Returns `(dL/dx, gradients)`. Gradients live in `gamma` / `beta` of the
    /// returned value; its running statistics are zero.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor, mode: Mode) -> Result<(Tensor, BatchNorm)> {
        let (lead, sites) = self.layout(x)?;
        if d_out.shape() != x.shape() {
            return Err(CtmError::invalid(format!(
                "batch norm output gradient has shape {:?}, expected {:?}",
                d_out.shape(),
                x.shape()
            )));
        }
        let c = self.channels();
        let (mean, inv, _) = self.moments(x, mode)?;
        let (xd, gd) = (x.data(), d_out.data());
        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        for l in 0..lead {
            for ch in 0..c {
                let base = (l * c + ch) * sites;
                let (m, s) = (mean[ch], inv[ch]);
                for (&v, &g) in xd[base..base + sites].iter().zip(&gd[base..base + sites]) {
                    d_gamma[ch] += g * (v - m) * s;
                    d_beta[ch] += g;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        let dxd = dx.data_mut();
        let gamma = self.gamma.data();
        let count = (lead * sites) as f64;
        for l in 0..lead {
            for ch in 0..c {
                let base = (l * c + ch) * sites;
                let (m, s, gv) = (mean[ch], inv[ch], gamma[ch]);
                let rows = dxd[base..base + sites]
                    .iter_mut()
                    .zip(&xd[base..base + sites])
                    .zip(&gd[base..base + sites]);
                match mode {
                    Mode::Train => {
                        // dx = gamma * inv / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
                        let (sum_dy, sum_dy_xhat) = (d_beta[ch], d_gamma[ch]);
                        for ((o, &v), &g) in rows {
                            let xhat = (v - m) * s;
                            *o = gv * s * (g - (sum_dy + xhat * sum_dy_xhat) / count);
                        }
                    }
                    Mode::Eval => {
                        for ((o, _), &g) in rows {
                            *o = gv * s * g;
                        }
                    }
                }
            }
        }
        let mut grads = BatchNorm::new(c);
        grads.gamma = Tensor::new([c], d_gamma)?;
        grads.beta = Tensor::new([c], d_beta)?;
        grads.running_mean.fill(0.0);
        grads.running_var.fill(0.0);
        Ok((dx, grads))
    }
}

impl Module for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Norm);
        f(join(prefix, "beta"), &self.beta, ParamKind::Norm);
        f(join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &mut self.gamma, ParamKind::Norm);
        f(join(prefix, "beta"), &mut self.beta, ParamKind::Norm);
        f(join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}
