//! Per-frame spatial layers used by the backbone.

use crate::error::{CtmError, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::layers::he_scale;
use crate::params::{join, Module, ParamKind};
use crate::rng::{randn, Rng};
use crate::tensor::Tensor;

/// Square `k x k` convolution over `(F, C, H, W)` frames, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

struct Geometry {
    frames: usize,
    c_in: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(CtmError::invalid(format!(
                "conv2d weight must be (C_out, C_in, k, k), got {s:?}"
            )));
        }
        if stride == 0 {
            return Err(CtmError::invalid("conv2d stride must be positive"));
        }
        Ok(Self { weight, stride, pad })
    }

    pub fn random(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let weight = randn(&[c_out, c_in, k, k], rng, he_scale(c_in * k * k)).expect("positive scale");
        Self::new(weight, stride, pad).expect("valid conv2d")
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn k(&self) -> usize {
        self.weight.shape()[2]
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(CtmError::invalid(format!(
                "conv2d expects (F, {}, H, W), got {s:?}",
                self.in_channels()
            )));
        }
        let k = self.k();
        let (h, w) = (s[2], s[3]);
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(CtmError::invalid(format!(
                "conv2d kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * self.pad,
                w + 2 * self.pad
            )));
        }
        Ok(Geometry {
            frames: s[0],
            c_in: s[1],
            h,
            w,
            h_out: (h + 2 * self.pad - k) / self.stride + 1,
            w_out: (w + 2 * self.pad - k) / self.stride + 1,
        })
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.k();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    /// Unfolds one frame into `(C_in * k * k, H_out * W_out)`.
    fn im2col(&self, g: &Geometry, frame: &[f64], col: &mut [f64]) {
        let k = self.k();
        let cols = g.h_out * g.w_out;
        for ci in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..g.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                        if iy < 0 || iy as usize >= g.h {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &frame[(ci * g.h + iy as usize) * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix as usize >= g.w { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, col: &[f64], frame: &mut [f64]) {
        let k = self.k();
        let cols = g.h_out * g.w_out;
        for ci in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..g.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let dst = &mut frame[(ci * g.h + iy as usize) * g.w..][..g.w];
                        for ox in 0..g.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] += row[oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let k = self.k();
        let co = self.out_channels();
        let rows = g.c_in * k * k;
        let cols = g.h_out * g.w_out;
        let mut out = Tensor::zeros(&[g.frames, co, g.h_out, g.w_out]);
        let mut col = vec![0.0; rows * cols];
        let in_frame = g.c_in * g.h * g.w;
        for f in 0..g.frames {
            self.im2col(&g, &x.data()[f * in_frame..(f + 1) * in_frame], &mut col);
            gemm(
                1.0,
                MatRef::row_major(self.weight.data(), co, rows),
                MatRef::row_major(&col, rows, cols),
                0.0,
                MatMut::row_major(&mut out.data_mut()[f * co * cols..(f + 1) * co * cols], co, cols),
            );
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Conv2d)> {
        let g = self.geometry(x)?;
        let k = self.k();
        let co = self.out_channels();
        let expected = [g.frames, co, g.h_out, g.w_out];
        if d_out.shape() != expected {
            return Err(CtmError::invalid(format!(
                "conv2d output gradient has shape {:?}, expected {expected:?}",
                d_out.shape()
            )));
        }
        let rows = g.c_in * k * k;
        let cols = g.h_out * g.w_out;
        let in_frame = g.c_in * g.h * g.w;
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut col = vec![0.0; rows * cols];
        let mut dcol = vec![0.0; rows * cols];
        for f in 0..g.frames {
            let dy = MatRef::row_major(&d_out.data()[f * co * cols..(f + 1) * co * cols], co, cols);
            self.im2col(&g, &x.data()[f * in_frame..(f + 1) * in_frame], &mut col);
            gemm(
                1.0,
                dy,
                MatRef::row_major(&col, rows, cols).t(),
                1.0,
                MatMut::row_major(dw.data_mut(), co, rows),
            );
            gemm(
                1.0,
                MatRef::row_major(self.weight.data(), co, rows).t(),
                dy,
                0.0,
                MatMut::row_major(&mut dcol, rows, cols),
            );
            self.col2im(&g, &dcol, &mut dx.data_mut()[f * in_frame..(f + 1) * in_frame]);
        }
        Ok((
            dx,
            Conv2d {
                weight: dw,
                stride: self.stride,
                pad: self.pad,
            },
        ))
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Weight);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
    }
}

/// Fully connected layer on `(B, C_in)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Normal(0, `scale`) weights, zero bias.
    pub fn random(c_in: usize, c_out: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            weight: randn(&[c_out, c_in], rng, scale).expect("positive scale"),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (co, ci) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.rank() != 2 || x.shape()[1] != ci {
            return Err(CtmError::invalid(format!(
                "linear layer expects (B, {ci}), got {:?}",
                x.shape()
            )));
        }
        Ok((x.shape()[0], ci, co))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, ci, co) = self.check(x)?;
        let mut out = Tensor::zeros(&[b, co]);
        for r in 0..b {
            out.data_mut()[r * co..(r + 1) * co].copy_from_slice(self.bias.data());
        }
        gemm(
            1.0,
            MatRef::row_major(x.data(), b, ci),
            MatRef::row_major(self.weight.data(), co, ci).t(),
            1.0,
            MatMut::row_major(out.data_mut(), b, co),
        );
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Linear)> {
        let (b, ci, co) = self.check(x)?;
        if d_out.shape() != [b, co] {
            return Err(CtmError::invalid(format!(
                "linear output gradient has shape {:?}, expected [{b}, {co}]",
                d_out.shape()
            )));
        }
        let dy = MatRef::row_major(d_out.data(), b, co);
        let mut dx = Tensor::zeros(&[b, ci]);
        gemm(
            1.0,
            dy,
            MatRef::row_major(self.weight.data(), co, ci),
            0.0,
            MatMut::row_major(dx.data_mut(), b, ci),
        );
        let mut dw = Tensor::zeros(&[co, ci]);
        gemm(
            1.0,
            dy.t(),
            MatRef::row_major(x.data(), b, ci),
            0.0,
            MatMut::row_major(dw.data_mut(), co, ci),
        );
        let mut db = Tensor::zeros(&[co]);
        for r in 0..b {
            for (o, &g) in db.data_mut().iter_mut().zip(&d_out.data()[r * co..(r + 1) * co]) {
                *o += g;
            }
        }
        Ok((dx, Linear { weight: dw, bias: db }))
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Weight);
        f(join(prefix, "bias"), &self.bias, ParamKind::Bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        f(join(prefix, "bias"), &mut self.bias, ParamKind::Bias);
    }
}

fn frames_4d(x: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CtmError::invalid(format!("{op} expects (F, C, H, W), got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// 2x2 average pooling, stride 2. Requires even extents.
pub fn avg_pool2_forward(x: &Tensor) -> Result<Tensor> {
    let (f, c, h, w) = frames_4d(x, "avg pool")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CtmError::invalid(format!(
            "2x2 average pooling needs even extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[f, c, ho, wo]);
    let xd = x.data();
    for (p, o) in out.data_mut().chunks_exact_mut(ho * wo).enumerate() {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let a = src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1];
                let b = src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1];
                o[y * wo + xx] = 0.25 * (a + b);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(x_shape: &[usize], d_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(x_shape);
    let (_, _, h, w) = frames_4d(&dx, "avg pool backward")?;
    let (ho, wo) = (h / 2, w / 2);
    if d_out.len() * 4 != dx.len() {
        return Err(CtmError::invalid("avg pool backward shape mismatch"));
    }
    let gd = d_out.data();
    for (p, dst) in dx.data_mut().chunks_exact_mut(h * w).enumerate() {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * gd[p * ho * wo + (y / 2) * wo + xx / 2];
            }
        }
    }
    Ok(dx)
}

/// Mean over (H, W): `(F, C, H, W) -> (F, C)`.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (f, c, h, w) = frames_4d(x, "global pool")?;
    let hw = h * w;
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new([f, c], data)
}

pub fn global_avg_pool_backward(x_shape: &[usize], d_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(x_shape);
    let (f, c, h, w) = frames_4d(&dx, "global pool backward")?;
    if d_out.shape() != [f, c] {
        return Err(CtmError::invalid("global pool backward shape mismatch"));
    }
    let hw = h * w;
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(d_out.data()) {
        plane.fill(g / hw as f64);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, check_module, probe_indices};

    fn direct_conv(layer: &Conv2d, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (ho, wo) = layer.output_extent(s[2], s[3]);
        let k = layer.weight.shape()[2];
        Tensor::from_fn(&[s[0], layer.out_channels(), ho, wo], |i| {
            let mut acc = 0.0;
            for ci in 0..s[1] {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (i[2] * layer.stride + ky) as isize - layer.pad as isize;
                        let ix = (i[3] * layer.stride + kx) as isize - layer.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s[2] && (ix as usize) < s[3] {
                            acc += layer.weight.get(&[i[1], ci, ky, kx])
                                * x.get(&[i[0], ci, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = Rng::new(10);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let x = randn(&[2, 3, 6, 5], &mut rng, 1.0).unwrap();
            let layer = Conv2d::random(3, 4, k, stride, pad, &mut rng);
            let y = layer.forward(&x).unwrap();
            assert!(y.max_abs_diff(&direct_conv(&layer, &x)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = Rng::new(12);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0)] {
            let x = randn(&[2, 2, 4, 4], &mut rng, 1.0).unwrap();
            let layer = Conv2d::random(2, 3, k, stride, pad, &mut rng);
            let loss = |l: &Conv2d, x: &Tensor| {
                let y = l.forward(x).unwrap();
                0.5 * y.dot(&y).unwrap()
            };
            let y = layer.forward(&x).unwrap();
            let (dx, grads) = layer.backward(&x, &y).unwrap();
            let idx = probe_indices(x.len(), None, &mut rng);
            let r = check_input("x", &x, &dx, &idx, |p| loss(&layer, p));
            assert!(r.passes(1e-6), "{r:?}");
            for r in check_module(&layer, &grads, None, &mut rng, |l| loss(l, &x)) {
                assert!(r.passes(1e-6), "{r:?}");
            }
        }
    }

    #[test]
    fn linear_and_pools_backward() {
        let mut rng = Rng::new(13);
        let x = randn(&[3, 4], &mut rng, 1.0).unwrap();
        let mut lin = Linear::random(4, 2, 1.0, &mut rng);
        lin.bias = randn(&[2], &mut rng, 1.0).unwrap();
        let loss = |l: &Linear, x: &Tensor| {
            let y = l.forward(x).unwrap();
            0.5 * y.dot(&y).unwrap()
        };
        let y = lin.forward(&x).unwrap();
        let (dx, grads) = lin.backward(&x, &y).unwrap();
        let idx = probe_indices(x.len(), None, &mut rng);
        assert!(check_input("x", &x, &dx, &idx, |p| loss(&lin, p)).passes(1e-6));
        for r in check_module(&lin, &grads, None, &mut rng, |l| loss(l, &x)) {
            assert!(r.passes(1e-6), "{r:?}");
        }

        let x = randn(&[2, 3, 4, 6], &mut rng, 1.0).unwrap();
        let pooled = avg_pool2_forward(&x).unwrap();
        assert_eq!(pooled.shape(), &[2, 3, 2, 3]);
        let dx = avg_pool2_backward(x.shape(), &pooled).unwrap();
        let idx = probe_indices(x.len(), None, &mut rng);
        let r = check_input("pool", &x, &dx, &idx, |p| {
            let y = avg_pool2_forward(p).unwrap();
            0.5 * y.dot(&y).unwrap()
        });
        assert!(r.passes(1e-6), "{r:?}");

        let g = global_avg_pool_forward(&x).unwrap();
        assert_eq!(g.shape(), &[2, 3]);
        let dx = global_avg_pool_backward(x.shape(), &g).unwrap();
        let r = check_input("gap", &x, &dx, &idx, |p| {
            let y = global_avg_pool_forward(p).unwrap();
            0.5 * y.dot(&y).unwrap()
        });
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn odd_pool_rejected() {
        assert!(avg_pool2_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }
}
