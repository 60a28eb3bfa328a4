//! Shape-changing and data-movement primitives.

use super::{check_numel, Graph, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// View with a new shape; element count must be preserved.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        check_numel("reshape", a.numel(), &shape)?;
        let av = self.value_rc(a);
        let ida = a.id;
        Ok(self.op_result(av.as_ref().clone(), shape, &[a], move |dout, sink| {
            sink.acc(ida, |ga| {
                for (g, &d) in ga.iter_mut().zip(dout.iter()) {
                    *g += d;
                }
            });
        }))
    }

    /// Collapse to a 1-D tensor.
    pub fn flatten(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel();
        self.reshape(a, vec![n])
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat: empty input list".into()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        for p in parts {
            if p.shape.len() != rank {
                return Err(Error::shape("concat", "rank mismatch".to_string()));
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != first.shape[d] {
                    return Err(Error::shape(
                        "concat",
                        format!(
                            "dimension {} differs: {} vs {}",
                            d, p.shape[d], first.shape[d]
                        ),
                    ));
                }
            }
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();

        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let axis_lens: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let total_axis: usize = axis_lens.iter().sum();

        let mut out = vec![T::zero(); outer * total_axis * inner];
        for o in 0..outer {
            let mut off = 0;
            for (pi, p) in parts.iter().enumerate() {
                let vals = self.value(p);
                let len = axis_lens[pi] * inner;
                let src = &vals[o * len..(o + 1) * len];
                let dst_start = (o * total_axis + off) * inner;
                out[dst_start..dst_start + len].copy_from_slice(src);
                off += axis_lens[pi];
            }
        }

        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let refs: Vec<&Tensor> = parts.to_vec();
        Ok(self.op_result(out, out_shape, &refs, move |dout, sink| {
            let mut off = 0;
            for (pi, &id) in ids.iter().enumerate() {
                let len = axis_lens[pi] * inner;
                let part_off = off;
                sink.acc(id, |gp| {
                    for o in 0..outer {
                        let src_start = (o * total_axis + part_off) * inner;
                        let dst = &mut gp[o * len..(o + 1) * len];
                        for (g, &d) in dst.iter_mut().zip(&dout[src_start..src_start + len]) {
                            *g += d;
                        }
                    }
                });
                off += axis_lens[pi];
            }
        }))
    }

    /// Channel concat for 4-D tensors.
    pub fn concat_channels(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        self.concat(1, parts)
    }

    /// Interleaving channel shuffle: with `C = groups * n`, input channel
    /// `g * n + i` moves to output channel `i * groups + g`.
    pub fn channel_shuffle(&mut self, a: &Tensor, groups: usize) -> Result<Tensor> {
        let (b, c, h, w) = a.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "channel_shuffle",
                format!("channels {} not divisible by groups {}", c, groups),
            ));
        }
        let n = c / groups;
        // perm[out_channel] = in_channel
        let mut perm = vec![0usize; c];
        for g in 0..groups {
            for i in 0..n {
                perm[i * groups + g] = g * n + i;
            }
        }
        let av = self.value_rc(a);
        let plane = h * w;
        let mut out = vec![T::zero(); av.len()];
        for bi in 0..b {
            for (oc, &ic) in perm.iter().enumerate() {
                let src = (bi * c + ic) * plane;
                let dst = (bi * c + oc) * plane;
                out[dst..dst + plane].copy_from_slice(&av[src..src + plane]);
            }
        }
        let ida = a.id;
        Ok(self.op_result(out, a.shape.clone(), &[a], move |dout, sink| {
            sink.acc(ida, |ga| {
                for bi in 0..b {
                    for (oc, &ic) in perm.iter().enumerate() {
                        let src = (bi * c + oc) * plane;
                        let dst = (bi * c + ic) * plane;
                        for (g, &d) in ga[dst..dst + plane].iter_mut().zip(&dout[src..src + plane])
                        {
                            *g += d;
                        }
                    }
                }
            });
        }))
    }

    /// Gather arbitrary elements by flat index into a 1-D tensor.
    pub fn pick(&mut self, a: &Tensor, indices: Vec<usize>) -> Result<Tensor> {
        let n = a.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!(
                "pick: index {} out of range for {} elements",
                bad, n
            )));
        }
        let av = self.value_rc(a);
        let out: Vec<T> = indices.iter().map(|&i| av[i]).collect();
        let len = indices.len();
        let ida = a.id;
        Ok(self.op_result(out, vec![len], &[a], move |dout, sink| {
            sink.acc(ida, |ga| {
                for (&i, &d) in indices.iter().zip(dout.iter()) {
                    ga[i] += d;
                }
            });
        }))
    }

    /// Spatial crop of one batch sample: returns shape (1, C, y1-y0, x1-x0).
    pub fn crop_spatial(
        &mut self,
        a: &Tensor,
        batch: usize,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    ) -> Result<Tensor> {
        let (b, c, h, w) = a.dims4()?;
        if batch >= b || y1 > h || x1 > w || y0 >= y1 || x0 >= x1 {
            return Err(Error::shape(
                "crop_spatial",
                format!(
                    "window b={} y={}..{} x={}..{} invalid for shape {:?}",
                    batch, y0, y1, x0, x1, a.shape
                ),
            ));
        }
        let (ch, cw) = (y1 - y0, x1 - x0);
        let av = self.value_rc(a);
        let mut out = Vec::with_capacity(c * ch * cw);
        for ci in 0..c {
            for y in y0..y1 {
                let row = ((batch * c + ci) * h + y) * w;
                out.extend_from_slice(&av[row + x0..row + x1]);
            }
        }
        let ida = a.id;
        Ok(
            self.op_result(out, vec![1, c, ch, cw], &[a], move |dout, sink| {
                sink.acc(ida, |ga| {
                    let mut k = 0;
                    for ci in 0..c {
                        for y in y0..y1 {
                            let row = ((batch * c + ci) * h + y) * w;
                            for x in x0..x1 {
                                ga[row + x] += dout[k];
                                k += 1;
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Stack 1-element tensors into a 1-D tensor.
    pub fn stack_scalars(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        for p in parts {
            if p.numel() != 1 {
                return Err(Error::shape(
                    "stack_scalars",
                    format!("expected scalars, got shape {:?}", p.shape),
                ));
            }
        }
        self.concat(0, parts)
    }
}
