//! Pooling and resampling primitives.

use super::{Graph, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// Max pooling with an explicit output extent. Windows start at
    /// `(oy*sh - pad, ox*sw - pad)`; cells outside the input act as negative
    /// infinity, so they never win. Gradient routes to the argmax cell, first
    /// occurrence in row-major scan order on ties.
    pub fn maxpool2d_padded(
        &mut self,
        input: &Tensor,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 {
            return Err(Error::Invalid("maxpool2d: kernel extents must be >= 1".into()));
        }
        if sh == 0 || sw == 0 {
            return Err(Error::Invalid("maxpool2d: stride extents must be >= 1".into()));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("maxpool2d: output extents must be >= 1".into()));
        }
        let xv = self.value_rc(input);
        let plane = h * w;
        let oplane = out_h * out_w;
        let mut out = vec![T::neg_infinity(); b * c * oplane];
        let mut argmax = vec![usize::MAX; b * c * oplane];
        for bc in 0..b * c {
            let src = &xv[bc * plane..(bc + 1) * plane];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - pad as isize;
                        if iy < 0 {
                            continue;
                        }
                        if iy >= h as isize {
                            break;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pad as isize;
                            if ix < 0 {
                                continue;
                            }
                            if ix >= w as isize {
                                break;
                            }
                            let v = src[iy as usize * w + ix as usize];
                            if v > best {
                                best = v;
                                best_idx = iy as usize * w + ix as usize;
                            }
                        }
                    }
                    let o = bc * oplane + oy * out_w + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let ida = input.id;
        Ok(self.op_result(
            out,
            vec![b, c, out_h, out_w],
            &[input],
            move |dout, sink| {
                sink.acc(ida, |ga| {
                    for bc in 0..b * c {
                        for o in 0..oplane {
                            let idx = argmax[bc * oplane + o];
                            if idx != usize::MAX {
                                ga[bc * plane + idx] += dout[bc * oplane + o];
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Unpadded max pooling with an explicit output extent.
    pub fn maxpool2d_exact(
        &mut self,
        input: &Tensor,
        kernel: (usize, usize),
        stride: (usize, usize),
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        self.maxpool2d_padded(input, kernel, stride, 0, out_h, out_w)
    }

    /// Max pooling; output extent is `ceil((extent - kernel)/stride) + 1`, so
    /// trailing windows may run past the input and are padded with -inf.
    pub fn maxpool2d(
        &mut self,
        input: &Tensor,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Tensor> {
        let (_, _, h, w) = input.dims4()?;
        if kernel.0 > h || kernel.1 > w {
            return Err(Error::shape(
                "maxpool2d",
                format!("kernel {:?} exceeds input {}x{}", kernel, h, w),
            ));
        }
        let out_h = (h - kernel.0).div_ceil(stride.0) + 1;
        let out_w = (w - kernel.1).div_ceil(stride.1) + 1;
        self.maxpool2d_exact(input, kernel, stride, out_h, out_w)
    }

    /// Nearest-neighbour resize: `out[y][x] = in[y*H/out_h][x*W/out_w]`
    /// (integer floor). Backward accumulates into the source cell.
    pub fn nearest_resize(&mut self, input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("nearest_resize: output extents must be >= 1".into()));
        }
        let ys: Vec<usize> = (0..out_h).map(|y| y * h / out_h).collect();
        let xs: Vec<usize> = (0..out_w).map(|x| x * w / out_w).collect();
        let xv = self.value_rc(input);
        let plane = h * w;
        let oplane = out_h * out_w;
        let mut out = vec![T::zero(); b * c * oplane];
        for bc in 0..b * c {
            let src = &xv[bc * plane..(bc + 1) * plane];
            let dst = &mut out[bc * oplane..(bc + 1) * oplane];
            for (oy, &iy) in ys.iter().enumerate() {
                let row = iy * w;
                for (ox, &ix) in xs.iter().enumerate() {
                    dst[oy * out_w + ox] = src[row + ix];
                }
            }
        }
        let ida = input.id;
        Ok(self.op_result(
            out,
            vec![b, c, out_h, out_w],
            &[input],
            move |dout, sink| {
                sink.acc(ida, |ga| {
                    for bc in 0..b * c {
                        let dst = &mut ga[bc * plane..(bc + 1) * plane];
                        let src = &dout[bc * oplane..(bc + 1) * oplane];
                        for (oy, &iy) in ys.iter().enumerate() {
                            for (ox, &ix) in xs.iter().enumerate() {
                                dst[iy * w + ix] += src[oy * out_w + ox];
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Spatial mean per channel: (B, C, H, W) -> (B, C, 1, 1).
    pub fn global_avg_pool(&mut self, input: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).unwrap();
        let xv = self.value_rc(input);
        let out: Vec<T> = (0..b * c)
            .map(|bc| xv[bc * plane..(bc + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let ida = input.id;
        Ok(self.op_result(out, vec![b, c, 1, 1], &[input], move |dout, sink| {
            sink.acc(ida, |ga| {
                for bc in 0..b * c {
                    let d = dout[bc] * inv;
                    for g in &mut ga[bc * plane..(bc + 1) * plane] {
                        *g += d;
                    }
                }
            });
        }))
    }

    /// Per-position max across channels: (B, C, H, W) -> (B, 1, H, W).
    /// Gradient routes to the winning channel, first on ties.
    pub fn channel_max(&mut self, input: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        let plane = h * w;
        let xv = self.value_rc(input);
        let mut out = vec![T::neg_infinity(); b * plane];
        let mut argc = vec![0usize; b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for p in 0..plane {
                    if src[p] > out[bi * plane + p] {
                        out[bi * plane + p] = src[p];
                        argc[bi * plane + p] = ci;
                    }
                }
            }
        }
        let ida = input.id;
        Ok(self.op_result(out, vec![b, 1, h, w], &[input], move |dout, sink| {
            sink.acc(ida, |ga| {
                for bi in 0..b {
                    for p in 0..plane {
                        let ci = argc[bi * plane + p];
                        ga[(bi * c + ci) * plane + p] += dout[bi * plane + p];
                    }
                }
            });
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_2x2_takes_max() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        let y = g.maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(&y), &[4.0]);
    }

    #[test]
    fn maxpool_1x1_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let x = g.leaf(data.clone(), vec![2, 3, 2, 2]).unwrap();
        let y = g.maxpool2d(&x, (1, 1), (1, 1)).unwrap();
        assert_eq!(g.value(&y), &data[..]);
    }

    #[test]
    fn maxpool_matches_per_window_bruteforce() {
        let mut st = 0x9e3779b9u64;
        let mut next = move || {
            st = st.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (st >> 40) as f64 / 1e6
        };
        let (h, w, kh, kw) = (6, 6, 2, 3);
        let data: Vec<f64> = (0..2 * h * w).map(|_| next()).collect();
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data.clone(), vec![1, 2, h, w]).unwrap();
        let y = g.maxpool2d(&x, (kh, kw), (kh, kw)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 2]);
        for ci in 0..2 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (iy, ix) = (oy * kh + ky, ox * kw + kx);
                            if iy < h && ix < w {
                                best = best.max(data[(ci * h + iy) * w + ix]);
                            }
                        }
                    }
                    let got = g.value(&y)[(ci * 3 + oy) * 2 + ox];
                    assert_eq!(got, best);
                }
            }
        }
    }

    #[test]
    fn resize_identity_and_index_map() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = g.leaf(data.clone(), vec![1, 1, 3, 4]).unwrap();
        let same = g.nearest_resize(&x, 3, 4).unwrap();
        assert_eq!(g.value(&same), &data[..]);

        // 1-D view [10,20,30,40] -> length 2 picks indices 0 and 2.
        let v = g.leaf(vec![10.0, 20.0, 30.0, 40.0], vec![1, 1, 1, 4]).unwrap();
        let half = g.nearest_resize(&v, 1, 2).unwrap();
        assert_eq!(g.value(&half), &[10.0, 30.0]);
    }

    #[test]
    fn resize_downsample_matches_index_map() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..48).map(|i| (i as f64) * 1.5 - 3.0).collect();
        let x = g.leaf(data.clone(), vec![1, 1, 8, 6]).unwrap();
        let y = g.nearest_resize(&x, 4, 3).unwrap();
        for oy in 0..4 {
            for ox in 0..3 {
                let (iy, ix) = (oy * 8 / 4, ox * 6 / 3);
                assert_eq!(g.value(&y)[oy * 3 + ox], data[iy * 6 + ix]);
            }
        }
    }

    #[test]
    fn channel_max_dominant_channel_wins() {
        let mut g: Graph<f64> = Graph::new();
        let mut data = vec![0.0; 3 * 4];
        for p in 0..4 {
            data[2 * 4 + p] = 10.0 + p as f64; // channel index 2 dominates
        }
        let x = g.leaf(data, vec![1, 3, 2, 2]).unwrap();
        let y = g.channel_max(&x).unwrap();
        assert_eq!(g.value(&y), &[10.0, 11.0, 12.0, 13.0]);
    }
}
