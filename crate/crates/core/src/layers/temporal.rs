use crate::error::{CtmError, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::layers::he_scale;
use crate::params::{join, Module, ParamKind};
use crate::rng::{randn, Rng};
use crate::tensor::Tensor;

/// `3x1x1` convolution along time, shared by every spatial position.
///
/// Input layout is `(N, C_in, T, H, W)`; with zero padding 1 on T,
/// `out[n, co, t, h, w] = sum_ci sum_{d in -1..=1} W[co, ci, d + 1] x[n, ci, t + d, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConv3 {
    pub weight: Tensor,
}

const PAD_T: usize = 1;

impl TemporalConv3 {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.rank() != 3 || weight.shape()[2] != 3 {
            return Err(CtmError::invalid(format!(
                "temporal conv weight must be (C_out, C_in, 3), got {:?}",
                weight.shape()
            )));
        }
        Ok(Self { weight })
    }

    pub fn random(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let weight = randn(&[c_out, c_in, 3], rng, he_scale(3 * c_in)).expect("positive scale");
        Self { weight }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(CtmError::invalid(format!(
                "temporal conv expects (N, C, T, H, W), got {s:?}"
            )));
        }
        if s[1] != self.in_channels() {
            return Err(CtmError::invalid(format!(
                "temporal conv expects {} channels on axis 1, got {}",
                self.in_channels(),
                s[1]
            )));
        }
        Ok((s[0], s[2], s[3] * s[4]))
    }

    /// Tap weights `W[:, :, tap]` as a contiguous `(C_out, C_in)` matrix.
    fn tap(&self, tap: usize) -> Vec<f64> {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let w = self.weight.data();
        (0..co * ci).map(|k| w[k * 3 + tap]).collect()
    }

    /// Valid output frames `[lo, hi)` for a tap.
    fn frames(tap: usize, t: usize) -> (usize, usize) {
        let lo = PAD_T.saturating_sub(tap);
        let hi = (t + PAD_T).saturating_sub(tap).min(t);
        (lo, hi.max(lo))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, sites) = self.dims(x)?;
        let (co, ci) = (self.out_channels(), self.in_channels());
        let s = x.shape();
        let mut out = Tensor::zeros(&[n, co, t, s[3], s[4]]);
        let plane = t * sites;
        for tap in 0..3 {
            let w = self.tap(tap);
            let (lo, hi) = Self::frames(tap, t);
            if lo >= hi {
                continue;
            }
            let shift = lo + tap - PAD_T;
            let cols = (hi - lo) * sites;
            for b in 0..n {
                let src = &x.data()[b * ci * plane + shift * sites..(b + 1) * ci * plane];
                let dst = &mut out.data_mut()[b * co * plane + lo * sites..(b + 1) * co * plane];
                gemm(
                    1.0,
                    MatRef::row_major(&w, co, ci),
                    MatRef {
                        data: src,
                        rows: ci,
                        cols,
                        row_stride: plane,
                        col_stride: 1,
                    },
                    1.0,
                    MatMut {
                        data: dst,
                        rows: co,
                        cols,
                        row_stride: plane,
                    },
                );
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, TemporalConv3)> {
        let (n, t, sites) = self.dims(x)?;
        let (co, ci) = (self.out_channels(), self.in_channels());
        let s = x.shape();
        let expected = [n, co, t, s[3], s[4]];
        if d_out.shape() != expected {
            return Err(CtmError::invalid(format!(
                "temporal conv output gradient has shape {:?}, expected {expected:?}",
                d_out.shape()
            )));
        }
        let plane = t * sites;
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        for tap in 0..3 {
            let w = self.tap(tap);
            let (lo, hi) = Self::frames(tap, t);
            if lo >= hi {
                continue;
            }
            let shift = lo + tap - PAD_T;
            let cols = (hi - lo) * sites;
            let mut dw_tap = vec![0.0; co * ci];
            for b in 0..n {
                let dy = MatRef {
                    data: &d_out.data()[b * co * plane + lo * sites..(b + 1) * co * plane],
                    rows: co,
                    cols,
                    row_stride: plane,
                    col_stride: 1,
                };
                let xs = MatRef {
                    data: &x.data()[b * ci * plane + shift * sites..(b + 1) * ci * plane],
                    rows: ci,
                    cols,
                    row_stride: plane,
                    col_stride: 1,
                };
                gemm(1.0, dy, xs.t(), 1.0, MatMut::row_major(&mut dw_tap, co, ci));
                gemm(
                    1.0,
                    MatRef::row_major(&w, co, ci).t(),
                    dy,
                    1.0,
                    MatMut {
                        data: &mut dx.data_mut()[b * ci * plane + shift * sites..(b + 1) * ci * plane],
                        rows: ci,
                        cols,
                        row_stride: plane,
                    },
                );
            }
            for (k, v) in dw_tap.into_iter().enumerate() {
                dw.data_mut()[k * 3 + tap] = v;
            }
        }
        Ok((dx, TemporalConv3 { weight: dw }))
    }
}

impl Module for TemporalConv3 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Weight);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
    }
}
