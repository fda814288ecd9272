use crate::error::Result;
use crate::layers::{relu_backward, relu_forward, BatchNorm, BnStats, Conv1x1, Conv2d, Mode};
use crate::params::{join, Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 1x1 strided projection on the shortcut of a stage-entry bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

/// Per-frame residual bottleneck on `(F, C, H, W)`.
///
/// `conv1` reduces to `out / 4` channels, `conv3` is the 3x3 spatial conv
/// (strided on stage entry), `conv2` expands back to `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub conv1: Conv1x1,
    pub bn1: BatchNorm,
    pub conv3: Conv2d,
    pub bn2: BatchNorm,
    pub conv2: Conv1x1,
    pub bn3: BatchNorm,
    pub projection: Option<Projection>,
}

#[derive(Debug, Clone)]
pub struct BottleneckCache {
    x: Tensor,
    z1: Tensor,
    a1: Tensor,
    r1: Tensor,
    z2: Tensor,
    a2: Tensor,
    r2: Tensor,
    z3: Tensor,
    zs: Option<Tensor>,
    pre: Tensor,
    stats: [Option<BnStats>; 4],
}

impl Bottleneck {
    pub fn random(c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        let mid = (c_out / 4).max(1);
        let conv1 = Conv1x1::random(c_in, mid, rng);
        let conv3 = Conv2d::random(mid, mid, 3, stride, 1, rng);
        let conv2 = Conv1x1::random(mid, c_out, rng);
        let projection = (c_in != c_out || stride != 1).then(|| Projection {
            conv: Conv2d::random(c_in, c_out, 1, stride, 0, rng),
            bn: BatchNorm::new(c_out),
        });
        Self {
            conv1,
            bn1: BatchNorm::new(mid),
            conv3,
            bn2: BatchNorm::new(mid),
            conv2,
            bn3: BatchNorm::new(c_out),
            projection,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv3.stride
    }

    pub fn forward_cached(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BottleneckCache)> {
        let z1 = self.conv1.forward(x)?;
        let (a1, s1) = self.bn1.forward(&z1, mode)?;
        let r1 = relu_forward(&a1);
        let z2 = self.conv3.forward(&r1)?;
        let (a2, s2) = self.bn2.forward(&z2, mode)?;
        let r2 = relu_forward(&a2);
        let z3 = self.conv2.forward(&r2)?;
        let (mut pre, s3) = self.bn3.forward(&z3, mode)?;
        let (zs, s4) = match &self.projection {
            Some(p) => {
                let zs = p.conv.forward(x)?;
                let (short, s4) = p.bn.forward(&zs, mode)?;
                pre.add_assign(&short)?;
                (Some(zs), s4)
            }
            None => {
                pre.add_assign(x)?;
                (None, None)
            }
        };
        let out = relu_forward(&pre);
        let cache = BottleneckCache {
            x: x.clone(),
            z1,
            a1,
            r1,
            z2,
            a2,
            r2,
            z3,
            zs,
            pre,
            stats: [s1, s2, s3, s4],
        };
        Ok((out, cache))
    }

    pub fn backward(&self, c: &BottleneckCache, d_out: &Tensor, mode: Mode) -> Result<(Tensor, Bottleneck)> {
        let d_pre = relu_backward(&c.pre, d_out)?;
        let (d_z3, bn3) = self.bn3.backward(&c.z3, &d_pre, mode)?;
        let (d_r2, conv2) = self.conv2.backward(&c.r2, &d_z3)?;
        let d_a2 = relu_backward(&c.a2, &d_r2)?;
        let (d_z2, bn2) = self.bn2.backward(&c.z2, &d_a2, mode)?;
        let (d_r1, conv3) = self.conv3.backward(&c.r1, &d_z2)?;
        let d_a1 = relu_backward(&c.a1, &d_r1)?;
        let (d_z1, bn1) = self.bn1.backward(&c.z1, &d_a1, mode)?;
        let (mut dx, conv1) = self.conv1.backward(&c.x, &d_z1)?;
        let projection = match (&self.projection, &c.zs) {
            (Some(p), Some(zs)) => {
                let (d_zs, bn) = p.bn.backward(zs, &d_pre, mode)?;
                let (d_xs, conv) = p.conv.backward(&c.x, &d_zs)?;
                dx.add_assign(&d_xs)?;
                Some(Projection { conv, bn })
            }
            _ => {
                dx.add_assign(&d_pre)?;
                None
            }
        };
        Ok((
            dx,
            Bottleneck {
                conv1,
                bn1,
                conv3,
                bn2,
                conv2,
                bn3,
                projection,
            },
        ))
    }

    pub fn commit(&mut self, c: &BottleneckCache) {
        let mut bns = vec![&mut self.bn1, &mut self.bn2, &mut self.bn3];
        if let Some(p) = &mut self.projection {
            bns.push(&mut p.bn);
        }
        for (bn, stats) in bns.into_iter().zip(&c.stats) {
            if let Some(s) = stats {
                bn.update_running(s);
            }
        }
    }
}

impl Module for Bottleneck {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some(p) = &self.projection {
            p.conv.visit(&join(prefix, "proj.conv"), f);
            p.bn.visit(&join(prefix, "proj.bn"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        if let Some(p) = &mut self.projection {
            p.conv.visit_mut(&join(prefix, "proj.conv"), f);
            p.bn.visit_mut(&join(prefix, "proj.bn"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, check_module, probe_indices};
    use crate::rng::randn;

    #[test]
    fn shapes_and_projection() {
        let mut rng = Rng::new(0);
        let same = Bottleneck::random(8, 8, 1, &mut rng);
        assert!(same.projection.is_none());
        let down = Bottleneck::random(8, 16, 2, &mut rng);
        let x = randn(&[3, 8, 5, 4], &mut rng, 1.0).unwrap();
        let (y, _) = down.forward_cached(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[3, 16, 3, 2]);
    }

    #[test]
    fn frames_are_independent_in_eval_mode() {
        let mut rng = Rng::new(1);
        let block = Bottleneck::random(4, 8, 2, &mut rng);
        let x = randn(&[3, 4, 4, 4], &mut rng, 1.0).unwrap();
        let (y, _) = block.forward_cached(&x, Mode::Eval).unwrap();
        let single = x.data()[..64].to_vec();
        let (y0, _) = block
            .forward_cached(&Tensor::new([1, 4, 4, 4], single).unwrap(), Mode::Eval)
            .unwrap();
        assert_eq!(&y.data()[..y0.len()], y0.data());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(2);
        for (cin, cout, stride) in [(4, 4, 1), (4, 8, 2)] {
            let block = Bottleneck::random(cin, cout, stride, &mut rng);
            let x = randn(&[3, cin, 4, 4], &mut rng, 1.0).unwrap();
            let (y, cache) = block.forward_cached(&x, Mode::Train).unwrap();
            let r = randn(y.shape(), &mut rng, 1.0).unwrap();
            let loss = |b: &Bottleneck, x: &Tensor| b.forward_cached(x, Mode::Train).unwrap().0.dot(&r).unwrap();
            let (dx, grads) = block.backward(&cache, &r, Mode::Train).unwrap();
            let idx = probe_indices(x.len(), Some(40), &mut rng);
            let rep = check_input("x", &x, &dx, &idx, |p| loss(&block, p));
            assert!(rep.passes(1e-5), "{rep:?}");
            for rep in check_module(&block, &grads, Some(20), &mut rng, |b| loss(b, &x)) {
                assert!(rep.passes(1e-5), "{rep:?}");
            }
        }
    }
}
