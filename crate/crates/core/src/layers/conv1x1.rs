use crate::error::{CtmError, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::layers::{channel_layout, he_scale};
use crate::params::{join, Module, ParamKind};
use crate::rng::{randn, Rng};
use crate::tensor::Tensor;

/// Pointwise channel projection: `out[.., co, s] = sum_ci W[co, ci] x[.., ci, s] (+ b[co])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1 {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv1x1 {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(CtmError::invalid(format!(
                "1x1 conv weight must be (C_out, C_in), got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(CtmError::invalid(format!(
                    "1x1 conv bias must be ({}), got {:?}",
                    weight.shape()[0],
                    b.shape()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    /// He-normal weights, no bias.
    pub fn random(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let weight = randn(&[c_out, c_in], rng, he_scale(c_in)).expect("positive scale");
        Self { weight, bias: None }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn out_shape(&self, x: &Tensor) -> Result<(usize, usize, Vec<usize>)> {
        let (lead, c, sites) = channel_layout(x.shape())?;
        if c != self.in_channels() {
            return Err(CtmError::invalid(format!(
                "1x1 conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let mut shape = x.shape().to_vec();
        let axis = shape.len() - 3;
        shape[axis] = self.out_channels();
        Ok((lead, sites, shape))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (lead, sites, shape) = self.out_shape(x)?;
        let (ci, co) = (self.in_channels(), self.out_channels());
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            if let Some(b) = &self.bias {
                for l in 0..lead {
                    for (o, &bv) in b.data().iter().enumerate() {
                        let base = (l * co + o) * sites;
                        od[base..base + sites].iter_mut().for_each(|v| *v = bv);
                    }
                }
            }
            for l in 0..lead {
                gemm(
                    1.0,
                    MatRef::row_major(self.weight.data(), co, ci),
                    MatRef::row_major(&x.data()[l * ci * sites..(l + 1) * ci * sites], ci, sites),
                    1.0,
                    MatMut::row_major(&mut od[l * co * sites..(l + 1) * co * sites], co, sites),
                );
            }
        }
        Ok(out)
    }

    /// Returns `(dL/dx, gradients)`; the gradient value reuses this type.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Conv1x1)> {
        let (lead, sites, shape) = self.out_shape(x)?;
        if d_out.shape() != shape.as_slice() {
            return Err(CtmError::invalid(format!(
                "1x1 conv output gradient has shape {:?}, expected {shape:?}",
                d_out.shape()
            )));
        }
        let (ci, co) = (self.in_channels(), self.out_channels());
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        let gd = d_out.data();
        for l in 0..lead {
            let dy = MatRef::row_major(&gd[l * co * sites..(l + 1) * co * sites], co, sites);
            let xl = MatRef::row_major(&x.data()[l * ci * sites..(l + 1) * ci * sites], ci, sites);
            gemm(1.0, dy, xl.t(), 1.0, MatMut::row_major(dw.data_mut(), co, ci));
            gemm(
                1.0,
                MatRef::row_major(self.weight.data(), co, ci).t(),
                dy,
                0.0,
                MatMut::row_major(&mut dx.data_mut()[l * ci * sites..(l + 1) * ci * sites], ci, sites),
            );
        }
        let db = self.bias.as_ref().map(|_| {
            let mut db = Tensor::zeros(&[co]);
            for l in 0..lead {
                for o in 0..co {
                    let base = (l * co + o) * sites;
                    db.data_mut()[o] += gd[base..base + sites].iter().sum::<f64>();
                }
            }
            db
        });
        Ok((dx, Conv1x1 { weight: dw, bias: db }))
    }
}

impl Module for Conv1x1 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, ParamKind::Bias);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b, ParamKind::Bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, check_module, probe_indices};
    use crate::params::count_params;

    fn identity(c: usize) -> Conv1x1 {
        let w = Tensor::from_fn(&[c, c], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        Conv1x1::new(w, None).unwrap()
    }

    #[test]
    fn identity_weight_is_identity() {
        let x = randn(&[2, 3, 4, 2, 2], &mut Rng::new(1), 1.0).unwrap();
        assert_eq!(identity(4).forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_sum() {
        let layer = Conv1x1::new(Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(), None).unwrap();
        let x = Tensor::new([1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::new(8);
        let x = randn(&[2, 3, 5, 3, 2], &mut rng, 1.0).unwrap();
        let layer = Conv1x1::new(
            randn(&[4, 5], &mut rng, 1.0).unwrap(),
            Some(randn(&[4], &mut rng, 1.0).unwrap()),
        )
        .unwrap();
        let y = layer.forward(&x).unwrap();
        let oracle = Tensor::from_fn(&[2, 3, 4, 3, 2], |i| {
            let mut acc = layer.bias.as_ref().unwrap().data()[i[2]];
            for ci in 0..5 {
                acc += layer.weight.get(&[i[2], ci]) * x.get(&[i[0], i[1], ci, i[3], i[4]]);
            }
            acc
        });
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(identity(4).forward(&x).is_err());
    }

    #[test]
    fn commutes_with_spatial_permutation() {
        let mut rng = Rng::new(3);
        let x = randn(&[2, 3, 4, 5], &mut rng, 1.0).unwrap();
        let layer = Conv1x1::random(3, 6, &mut rng);
        let swap = [0, 1, 3, 2];
        let a = layer.forward(&x.permute(&swap).unwrap()).unwrap();
        let b = layer.forward(&x).unwrap().permute(&swap).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let x = randn(&[2, 2, 3, 2, 2], &mut rng, 1.0).unwrap();
        let layer = Conv1x1::new(
            randn(&[4, 3], &mut rng, 1.0).unwrap(),
            Some(randn(&[4], &mut rng, 1.0).unwrap()),
        )
        .unwrap();
        let loss = |l: &Conv1x1, x: &Tensor| {
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

    #[test]
    fn parameter_count() {
        assert_eq!(count_params(&Conv1x1::random(4, 8, &mut Rng::new(0))), 32);
    }
}
