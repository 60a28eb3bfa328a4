//! Batch normalization, softmax and binary cross-entropy primitives.

use std::rc::Rc;

use super::ops::sigmoid_t;
use super::{same_shape, Graph, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// Per-channel affine `y = x * scale[c] + shift[c]` on a 4-D tensor.
    pub fn channel_scale_shift(
        &mut self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(Error::shape(
                "channel_scale_shift",
                format!(
                    "scale {:?} / shift {:?} do not match {} channels",
                    scale.shape(),
                    shift.shape(),
                    c
                ),
            ));
        }
        let xv = self.value_rc(x);
        let sv = self.value_rc(scale);
        let tv = self.value_rc(shift);
        let plane = h * w;
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (s, t) = (sv[ci], tv[ci]);
                for p in 0..plane {
                    out[base + p] = xv[base + p].mul_add(s, t);
                }
            }
        }
        let (idx, ids, idt) = (x.id, scale.id, shift.id);
        Ok(self.op_result(
            out,
            x.shape.clone(),
            &[x, scale, shift],
            move |dout, sink| {
                sink.acc(idx, |gx| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let s = sv[ci];
                            for p in 0..plane {
                                gx[base + p] += dout[base + p] * s;
                            }
                        }
                    }
                });
                sink.acc(ids, |gs| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let mut acc = T::zero();
                            for p in 0..plane {
                                acc += dout[base + p] * xv[base + p];
                            }
                            gs[ci] += acc;
                        }
                    }
                });
                sink.acc(idt, |gt| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            gt[ci] += dout[base..base + plane].iter().copied().sum();
                        }
                    }
                });
            },
        ))
    }

    /// Training-mode batch norm over (B, H, W) per channel, biased variance.
    /// Returns the normalized tensor and the batch statistics so the caller
    /// can update running averages.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: T,
    ) -> Result<(Tensor, Vec<T>, Vec<T>)> {
        let (b, c, h, w) = x.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must have shape [{}]", c),
            ));
        }
        let plane = h * w;
        let n = b * plane;
        let invn = T::one() / T::from_usize(n).unwrap();
        let xv = self.value_rc(x);
        let gv = self.value_rc(gamma);
        let bv = self.value_rc(beta);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                s += xv[base..base + plane].iter().copied().sum();
            }
            let m = s * invn;
            let mut v = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for p in 0..plane {
                    let d = xv[base + p] - m;
                    v += d * d;
                }
            }
            mean[ci] = m;
            var[ci] = v * invn;
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (m, is, g, be) = (mean[ci], invstd[ci], gv[ci], bv[ci]);
                for p in 0..plane {
                    let xh = (xv[base + p] - m) * is;
                    xhat[base + p] = xh;
                    out[base + p] = xh.mul_add(g, be);
                }
            }
        }
        let xhat = Rc::new(xhat);
        let invstd_rc = Rc::new(invstd);
        let (idx, idg, idb) = (x.id, gamma.id, beta.id);
        let xhat_b = Rc::clone(&xhat);
        let invstd_b = Rc::clone(&invstd_rc);
        let t = self.op_result(
            out,
            x.shape.clone(),
            &[x, gamma, beta],
            move |dout, sink| {
                // Per-channel reductions of dout and dout*xhat.
                let mut dsum = vec![T::zero(); c];
                let mut dxsum = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let mut s0 = T::zero();
                        let mut s1 = T::zero();
                        for p in 0..plane {
                            s0 += dout[base + p];
                            s1 += dout[base + p] * xhat_b[base + p];
                        }
                        dsum[ci] += s0;
                        dxsum[ci] += s1;
                    }
                }
                sink.acc(idb, |gb| {
                    for ci in 0..c {
                        gb[ci] += dsum[ci];
                    }
                });
                sink.acc(idg, |gg| {
                    for ci in 0..c {
                        gg[ci] += dxsum[ci];
                    }
                });
                sink.acc(idx, |gx| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let k = gv[ci] * invstd_b[ci] * invn;
                            let nf = T::from_usize(n).unwrap();
                            for p in 0..plane {
                                gx[base + p] += k
                                    * (nf * dout[base + p]
                                        - dsum[ci]
                                        - xhat_b[base + p] * dxsum[ci]);
                            }
                        }
                    }
                });
            },
        );
        Ok((t, mean, var))
    }

    /// Evaluation-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats must have length {}", c),
            ));
        }
        let inv: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let shift: Vec<T> = running_mean
            .iter()
            .zip(inv.iter())
            .map(|(&m, &i)| -m * i)
            .collect();
        let s = self.constant(inv, vec![c])?;
        let t = self.constant(shift, vec![c])?;
        // (x - m)/sqrt(v+eps) then gamma/beta, keeping both affines differentiable.
        let xn = self.channel_scale_shift(x, &s, &t)?;
        self.channel_scale_shift(&xn, gamma, beta)
    }

    /// Softmax along `axis`, shift-stabilized.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let rank = x.shape.len();
        if axis >= rank {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        let alen = x.shape[axis];
        let inner: usize = x.shape[axis + 1..].iter().product();
        let outer: usize = x.shape[..axis].iter().product();
        let xv = self.value_rc(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * alen + k) * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..alen {
                    m = m.max(xv[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..alen {
                    let e = (xv[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..alen {
                    out[at(k)] /= z;
                }
            }
        }
        let yv = Rc::new(out.clone());
        let ida = x.id;
        Ok(self.op_result(out, x.shape.clone(), &[x], move |dout, sink| {
            sink.acc(ida, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * alen + k) * inner + i;
                        let mut dot = T::zero();
                        for k in 0..alen {
                            dot += dout[at(k)] * yv[at(k)];
                        }
                        for k in 0..alen {
                            gx[at(k)] += yv[at(k)] * (dout[at(k)] - dot);
                        }
                    }
                }
            });
        }))
    }

    /// Elementwise binary cross-entropy on logits:
    /// `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        same_shape("bce_with_logits", logits, targets)?;
        let xv = self.value_rc(logits);
        let tv = self.value_rc(targets);
        let out: Vec<T> = xv
            .iter()
            .zip(tv.iter())
            .map(|(&x, &t)| {
                let pos = if x > T::zero() { x } else { T::zero() };
                pos - x * t + (T::one() + (-x.abs()).exp()).ln()
            })
            .collect();
        let (idx, idt) = (logits.id, targets.id);
        Ok(self.op_result(
            out,
            logits.shape.clone(),
            &[logits, targets],
            move |dout, sink| {
                sink.acc(idx, |gx| {
                    for i in 0..dout.len() {
                        gx[i] += dout[i] * (sigmoid_t(xv[i]) - tv[i]);
                    }
                });
                sink.acc(idt, |gt| {
                    for i in 0..dout.len() {
                        gt[i] -= dout[i] * xv[i];
                    }
                });
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .leaf(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], vec![2, 3])
            .unwrap();
        let y = g.softmax(&x, 1).unwrap();
        let v = g.value(&y);
        for row in 0..2 {
            let s: f64 = v[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(v[row * 3..(row + 1) * 3].iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0], vec![1]).unwrap();
        let t = g.constant(vec![0.0], vec![1]).unwrap();
        let l = g.bce_with_logits(&x, &t).unwrap();
        assert!((g.scalar_value(&l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], vec![2, 1, 2, 2])
            .unwrap();
        let gamma = g.leaf(vec![1.0], vec![1]).unwrap();
        let beta = g.leaf(vec![0.0], vec![1]).unwrap();
        let (y, mean, var) = g.batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        assert!((mean[0] - 13.75).abs() < 1e-12);
        let v = g.value(&y);
        let m: f64 = v.iter().sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-9, "normalized mean {m}");
        let s: f64 = v.iter().map(|&a| a * a).sum::<f64>() / 8.0;
        assert!((s - 1.0).abs() < 1e-4, "normalized var {s} (var {})", var[0]);
    }
}
