//! Temporal-channel convolution (TCC).
//!
//! For an input `F` of shape `(N, T, C, H, W)` and one `kT x kC` filter per
//! spatial position, TCC computes
//!
//! ```text
//! O[n, t, c, h, w] = sum_{a, b} K[h*W + w, 0, a, b] * F[n, t + a - pad_t, c + b - pad_c, h, w]
//! ```
//!
//! with zero reads outside the input. It never mixes spatial positions. For the
//! 3x3 kernel with padding (1, 1), the offsets `i = a - 1`, `j = b - 1` range
//! over `{-1, 0, 1}` and the output keeps the input shape.
//!
//! Two forward routes are provided: [`tcc_forward_naive`] evaluates the sum
//! directly, [`tcc_forward_fast`] moves `F` into the `(N, H*W, T, C)` layout and
//! runs a grouped (depthwise) 2D convolution with one group per position.

use crate::error::{CtmError, Result};
use crate::params::{join, Module, ParamKind};
use crate::rng::{randn, Rng};
use crate::tensor::{Element, Tensor};

/// Zero-padding on the temporal and channel axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddingPolicy {
    pub pad_t: usize,
    pub pad_c: usize,
}

impl Default for PaddingPolicy {
    fn default() -> Self {
        Self { pad_t: 1, pad_c: 1 }
    }
}

/// Unshared filter bank: one `(kT, kC)` filter per spatial position, stored as
/// `(H*W, 1, kT, kC)`. Group `g` is position `(g / W, g % W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TccKernel<T: Element = f64> {
    weights: Tensor<T>,
    spatial: (usize, usize),
}

impl<T: Element> TccKernel<T> {
    pub fn new(weights: Tensor<T>, spatial: (usize, usize)) -> Result<Self> {
        let (h, w) = spatial;
        let s = weights.shape();
        if s.len() != 4 || s[0] != h * w || s[1] != 1 {
            return Err(CtmError::invalid(format!(
                "TCC weights must have shape ({}, 1, kT, kC) for spatial extent {h}x{w}, got {s:?}",
                h * w
            )));
        }
        Ok(Self { weights, spatial })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::new(Tensor::zeros(&[h * w, 1, 3, 3]), (h, w)).expect("valid shape")
    }

    /// Center tap 1, everything else 0: the identity map.
    pub fn delta(h: usize, w: usize) -> Self {
        let mut k = Self::zeros(h, w);
        for g in 0..h * w {
            k.weights.set(&[g, 0, 1, 1], T::one());
        }
        k
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn spatial_extent(&self) -> (usize, usize) {
        self.spatial
    }

    pub fn groups(&self) -> usize {
        self.spatial.0 * self.spatial.1
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

impl TccKernel<f64> {
    /// He-normal init, fan-in = kT * kC = 9.
    pub fn random(h: usize, w: usize, rng: &mut Rng) -> Self {
        let weights = randn(&[h * w, 1, 3, 3], rng, (2.0f64 / 9.0).sqrt()).expect("positive scale");
        Self::new(weights, (h, w)).expect("valid shape")
    }
}

impl Module for TccKernel<f64> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weights, ParamKind::Weight);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weights, ParamKind::Weight);
    }
}

/// Output extent of a stride-1 correlation, or `None` when the kernel does not fit.
fn out_extent(input: usize, pad: usize, k: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v + 1)
}

struct TccDims {
    n: usize,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    kt: usize,
    kc: usize,
    t_out: usize,
    c_out: usize,
}

fn tcc_dims<T: Element>(f: &Tensor<T>, k: &TccKernel<T>, pad: PaddingPolicy) -> Result<TccDims> {
    let s = f.shape();
    if s.len() != 5 {
        return Err(CtmError::invalid(format!(
            "TCC input must be (N, T, C, H, W), got shape {s:?}"
        )));
    }
    let (n, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    if (h, w) != k.spatial {
        return Err(CtmError::invalid(format!(
            "TCC spatial extent mismatch: input is {h}x{w}, kernel is bound to {}x{}",
            k.spatial.0, k.spatial.1
        )));
    }
    let (kt, kc) = k.kernel_size();
    let t_out = out_extent(t, pad.pad_t, kt);
    let c_out = out_extent(c, pad.pad_c, kc);
    match (t_out, c_out) {
        (Some(t_out), Some(c_out)) => Ok(TccDims {
            n,
            t,
            c,
            h,
            w,
            kt,
            kc,
            t_out,
            c_out,
        }),
        _ => Err(CtmError::invalid(format!(
            "TCC kernel {kt}x{kc} larger than padded (T, C) plane {}x{}",
            t + 2 * pad.pad_t,
            c + 2 * pad.pad_c
        ))),
    }
}

/// Direct nested-loop evaluation, position-major.
pub fn tcc_forward_naive<T: Element>(
    f: &Tensor<T>,
    k: &TccKernel<T>,
    pad: PaddingPolicy,
) -> Result<Tensor<T>> {
    let d = tcc_dims(f, k, pad)?;
    let mut out = Tensor::zeros(&[d.n, d.t_out, d.c_out, d.h, d.w]);
    let fd = f.data();
    let kd = k.weights.data();
    let od = out.data_mut();
    let hw = d.h * d.w;
    for n in 0..d.n {
        for h in 0..d.h {
            for w in 0..d.w {
                let g = h * d.w + w;
                for t in 0..d.t_out {
                    for c in 0..d.c_out {
                        let mut acc = T::zero();
                        for a in 0..d.kt {
                            let ti = t + a;
                            if ti < pad.pad_t || ti - pad.pad_t >= d.t {
                                continue;
                            }
                            let ti = ti - pad.pad_t;
                            for b in 0..d.kc {
                                let ci = c + b;
                                if ci < pad.pad_c || ci - pad.pad_c >= d.c {
                                    continue;
                                }
                                let ci = ci - pad.pad_c;
                                let kv = kd[(g * d.kt + a) * d.kc + b];
                                let fv = fd[((n * d.t + ti) * d.c + ci) * hw + g];
                                acc += kv * fv;
                            }
                        }
                        od[((n * d.t_out + t) * d.c_out + c) * hw + g] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(N, T, C, H, W)` -> `(N, H*W, T, C)`.
fn to_position_major<T: Element>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    let (n, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    f.permute(&[0, 3, 4, 1, 2])?.into_reshape(&[n, h * w, t, c])
}

/// `(N, H*W, T, C)` -> `(N, T, C, H, W)`.
fn from_position_major<T: Element>(x: Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let (n, t, c) = (s[0], s[2], s[3]);
    x.into_reshape(&[n, h, w, t, c])?.permute(&[0, 3, 4, 1, 2])
}

/// Permute to `(N, H*W, T, C)`, depthwise-convolve with `H*W` groups, permute back.
pub fn tcc_forward_fast<T: Element>(
    f: &Tensor<T>,
    k: &TccKernel<T>,
    pad: PaddingPolicy,
) -> Result<Tensor<T>> {
    let d = tcc_dims(f, k, pad)?;
    let x = to_position_major(f)?;
    let y = depthwise_conv2d(&x, &k.weights, (pad.pad_t, pad.pad_c))?;
    from_position_major(y, d.h, d.w)
}

/// Analytic adjoint of TCC: returns `(dL/dF, dL/dK)` given `dL/dO`.
///
/// `d_f[n,t,c,h,w] = sum_{i,j} K[g,0,i+1,j+1] * d_out[n,t-i,c-j,h,w]` and
/// `d_k[g,0,i+1,j+1] = sum_{n,t,c} d_out[n,t,c,h,w] * F[n,t+i,c+j,h,w]`,
/// accumulated in `(n, t, c)` order.
pub fn tcc_backward<T: Element>(
    f: &Tensor<T>,
    k: &TccKernel<T>,
    d_out: &Tensor<T>,
    pad: PaddingPolicy,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = tcc_dims(f, k, pad)?;
    let expected = [d.n, d.t_out, d.c_out, d.h, d.w];
    if d_out.shape() != expected {
        return Err(CtmError::invalid(format!(
            "TCC output gradient has shape {:?}, expected {expected:?}",
            d_out.shape()
        )));
    }
    let x = to_position_major(f)?;
    let dy = to_position_major(d_out)?;
    let (dx, dw) = depthwise_conv2d_backward(&x, &k.weights, &dy, (pad.pad_t, pad.pad_c))?;
    Ok((from_position_major(dx, d.h, d.w)?, dw))
}

struct DwDims {
    n: usize,
    g: usize,
    a: usize,
    b: usize,
    ka: usize,
    kb: usize,
    a_out: usize,
    b_out: usize,
}

fn depthwise_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>, pad: (usize, usize)) -> Result<DwDims> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 {
        return Err(CtmError::invalid(format!(
            "depthwise input must be (N, G, A, B), got {xs:?}"
        )));
    }
    if ws.len() != 4 || ws[1] != 1 {
        return Err(CtmError::invalid(format!(
            "depthwise weights must be (G, 1, kA, kB), got {ws:?}"
        )));
    }
    if xs[1] != ws[0] {
        return Err(CtmError::invalid(format!(
            "depthwise group mismatch: input has {} groups, weights {}",
            xs[1], ws[0]
        )));
    }
    let (a, b, ka, kb) = (xs[2], xs[3], ws[2], ws[3]);
    match (out_extent(a, pad.0, ka), out_extent(b, pad.1, kb)) {
        (Some(a_out), Some(b_out)) => Ok(DwDims {
            n: xs[0],
            g: xs[1],
            a,
            b,
            ka,
            kb,
            a_out,
            b_out,
        }),
        _ => Err(CtmError::invalid(format!(
            "kernel {ka}x{kb} larger than padded input {}x{}",
            a + 2 * pad.0,
            b + 2 * pad.1
        ))),
    }
}

/// Output columns `ob` whose input column `ob + tap - pad` lies in `0..len`.
#[inline]
fn valid_range(tap: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

/// Grouped stride-1 2D cross-correlation with zero padding.
///
/// `x: (N, G, A, B)`, `w: (G, 1, kA, kB)` -> `(N, G, A + 2 pA - kA + 1, B + 2 pB - kB + 1)`.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let d = depthwise_dims(x, w, pad)?;
    let mut out = Tensor::zeros(&[d.n, d.g, d.a_out, d.b_out]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    let in_plane = d.a * d.b;
    let out_plane = d.a_out * d.b_out;
    for ng in 0..d.n * d.g {
        let g = ng % d.g;
        let src = &xd[ng * in_plane..(ng + 1) * in_plane];
        let dst = &mut od[ng * out_plane..(ng + 1) * out_plane];
        for ta in 0..d.ka {
            let (oa_lo, oa_hi) = valid_range(ta, pad.0, d.a, d.a_out);
            for tb in 0..d.kb {
                let kv = wd[(g * d.ka + ta) * d.kb + tb];
                let (ob_lo, ob_hi) = valid_range(tb, pad.1, d.b, d.b_out);
                for oa in oa_lo..oa_hi {
                    let ia = oa + ta - pad.0;
                    let ib_lo = ob_lo + tb - pad.1;
                    let row_in = &src[ia * d.b + ib_lo..ia * d.b + ib_lo + (ob_hi - ob_lo)];
                    let row_out = &mut dst[oa * d.b_out + ob_lo..oa * d.b_out + ob_hi];
                    for (o, &i) in row_out.iter_mut().zip(row_in) {
                        *o += kv * i;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`] with respect to input and weights.
pub fn depthwise_conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    d_out: &Tensor<T>,
    pad: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = depthwise_dims(x, w, pad)?;
    let expected = [d.n, d.g, d.a_out, d.b_out];
    if d_out.shape() != expected {
        return Err(CtmError::invalid(format!(
            "depthwise output gradient has shape {:?}, expected {expected:?}",
            d_out.shape()
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wd = w.data();
    let gd = d_out.data();
    let in_plane = d.a * d.b;
    let out_plane = d.a_out * d.b_out;
    {
        let dxd = dx.data_mut();
        for ng in 0..d.n * d.g {
            let g = ng % d.g;
            let dy = &gd[ng * out_plane..(ng + 1) * out_plane];
            let dst = &mut dxd[ng * in_plane..(ng + 1) * in_plane];
            for ta in 0..d.ka {
                let (oa_lo, oa_hi) = valid_range(ta, pad.0, d.a, d.a_out);
                for tb in 0..d.kb {
                    let kv = wd[(g * d.ka + ta) * d.kb + tb];
                    let (ob_lo, ob_hi) = valid_range(tb, pad.1, d.b, d.b_out);
                    for oa in oa_lo..oa_hi {
                        let ia = oa + ta - pad.0;
                        let ib_lo = ob_lo + tb - pad.1;
                        let row_dy = &dy[oa * d.b_out + ob_lo..oa * d.b_out + ob_hi];
                        let row_dx = &mut dst[ia * d.b + ib_lo..ia * d.b + ib_lo + (ob_hi - ob_lo)];
                        for (o, &v) in row_dx.iter_mut().zip(row_dy) {
                            *o += kv * v;
                        }
                    }
                }
            }
        }
    }
    {
        let dwd = dw.data_mut();
        // accumulation order per weight: n, then rows (t), then columns (c)
        for n in 0..d.n {
            for g in 0..d.g {
                let ng = n * d.g + g;
                let src = &xd[ng * in_plane..(ng + 1) * in_plane];
                let dy = &gd[ng * out_plane..(ng + 1) * out_plane];
                for ta in 0..d.ka {
                    let (oa_lo, oa_hi) = valid_range(ta, pad.0, d.a, d.a_out);
                    for tb in 0..d.kb {
                        let (ob_lo, ob_hi) = valid_range(tb, pad.1, d.b, d.b_out);
                        let mut acc = dwd[(g * d.ka + ta) * d.kb + tb];
                        for oa in oa_lo..oa_hi {
                            let ia = oa + ta - pad.0;
                            let ib_lo = ob_lo + tb - pad.1;
                            let row_dy = &dy[oa * d.b_out + ob_lo..oa * d.b_out + ob_hi];
                            let row_x = &src[ia * d.b + ib_lo..ia * d.b + ib_lo + (ob_hi - ob_lo)];
                            for (&v, &xv) in row_dy.iter().zip(row_x) {
                                acc += v * xv;
                            }
                        }
                        dwd[(g * d.ka + ta) * d.kb + tb] = acc;
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn temporal_column_example() {
        // H = W = 1, T = 3, C = 1, center column (j = 0) all ones.
        let f = clip(&[1, 3, 1, 1, 1], vec![1.0, 2.0, 3.0]);
        let mut k = TccKernel::zeros(1, 1);
        for a in 0..3 {
            k.weights_mut().set(&[0, 0, a, 1], 1.0);
        }
        let pad = PaddingPolicy::default();
        let naive = tcc_forward_naive(&f, &k, pad).unwrap();
        assert_eq!(naive.data(), &[3.0, 6.0, 5.0]);
        assert_eq!(tcc_forward_fast(&f, &k, pad).unwrap(), naive);
    }

    #[test]
    fn delta_and_zero_kernels() {
        let mut rng = Rng::new(5);
        let f = randn(&[2, 4, 3, 2, 3], &mut rng, 1.0).unwrap();
        let pad = PaddingPolicy::default();
        let delta = TccKernel::delta(2, 3);
        assert_eq!(tcc_forward_naive(&f, &delta, pad).unwrap(), f);
        assert_eq!(tcc_forward_fast(&f, &delta, pad).unwrap(), f);
        let zero = TccKernel::zeros(2, 3);
        assert_eq!(tcc_forward_naive(&f, &zero, pad).unwrap().max_abs(), 0.0);
        assert_eq!(tcc_forward_fast(&f, &zero, pad).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let f: Tensor = Tensor::zeros(&[1, 2, 2, 3, 3]);
        let k = TccKernel::zeros(2, 2);
        let pad = PaddingPolicy::default();
        for result in [
            tcc_forward_naive(&f, &k, pad),
            tcc_forward_fast(&f, &k, pad),
        ] {
            match result {
                Err(CtmError::InvalidArgument(msg)) => assert!(msg.contains("3x3"), "{msg}"),
                other => panic!("expected invalid argument, got {other:?}"),
            }
        }
        assert!(tcc_backward(&f, &k, &f, pad).is_err());
    }

    #[test]
    fn depthwise_examples() {
        let x = clip(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(depthwise_conv2d(&x, &delta, (1, 1)).unwrap(), x);
        let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
        assert_eq!(
            depthwise_conv2d(&x, &ones, (1, 1)).unwrap().data(),
            &[10.0, 10.0, 10.0, 10.0]
        );
    }

    #[test]
    fn depthwise_groups_do_not_mix() {
        let mut rng = Rng::new(11);
        let mut x = randn(&[1, 2, 4, 5], &mut rng, 1.0).unwrap();
        let w = randn(&[2, 1, 3, 3], &mut rng, 1.0).unwrap();
        for v in &mut x.data_mut()[20..] {
            *v = 0.0;
        }
        let y = depthwise_conv2d(&x, &w, (1, 1)).unwrap();
        assert!(y.data()[..20].iter().any(|&v| v != 0.0));
        assert!(y.data()[20..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(depthwise_conv2d(&x, &w, (1, 1)).is_err());
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(depthwise_conv2d(&x, &w, (1, 1)).is_err());
    }

    #[test]
    fn backward_zero_and_identity() {
        let mut rng = Rng::new(2);
        let f = randn(&[1, 3, 4, 2, 2], &mut rng, 1.0).unwrap();
        let k = TccKernel::random(2, 2, &mut rng);
        let pad = PaddingPolicy::default();
        let (df, dk) = tcc_backward(&f, &k, &f.zeros_like(), pad).unwrap();
        assert_eq!(df.max_abs(), 0.0);
        assert_eq!(dk.max_abs(), 0.0);
        let g = randn(&[1, 3, 4, 2, 2], &mut rng, 1.0).unwrap();
        let (df, _) = tcc_backward(&f, &TccKernel::delta(2, 2), &g, pad).unwrap();
        assert_eq!(df, g);
    }

    #[test]
    fn parameter_count() {
        assert_eq!(TccKernel::<f64>::zeros(7, 7).param_count(), 441);
    }

    #[test]
    fn f32_paths_agree() {
        let mut rng = Rng::new(9);
        let f: Tensor<f32> = randn(&[1, 4, 6, 3, 3], &mut rng, 1.0).unwrap().cast();
        let k = TccKernel::new(TccKernel::random(3, 3, &mut rng).weights().cast::<f32>(), (3, 3)).unwrap();
        let pad = PaddingPolicy::default();
        let a = tcc_forward_naive(&f, &k, pad).unwrap();
        let b = tcc_forward_fast(&f, &k, pad).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
    }
}
