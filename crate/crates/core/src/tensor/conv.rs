//! 2-D convolution (cross-correlation) with grouping, via im2col + GEMM.
//!
//! The GEMM kernels are written in saxpy row form so the inner loop
//! autovectorizes; all cross-batch reductions run in fixed index order, so
//! results are bit-identical regardless of the rayon thread count.

use rayon::prelude::*;

use super::{Graph, Real, Tensor};
use crate::error::{Error, Result};

/// C (m×n) += A (m×k) · B (k×n), row-major.
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
    }
}

fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    /// im2col rows per group.
    fn kdim(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    /// im2col columns.
    fn ndim(&self) -> usize {
        self.ho * self.wo
    }
}

/// Fill `col` (kdim × ndim) for one sample and group. Zero padding.
fn im2col<T: Real>(input: &[T], d: &ConvDims, bi: usize, gi: usize, col: &mut [T]) {
    let (cg, k, n) = (d.cin_g(), d.k, d.ndim());
    for c in 0..cg {
        let chan = (bi * d.cin + gi * cg + c) * d.h * d.w;
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let out_row = row + oy * d.wo;
                    if iy < 0 || iy >= d.h as isize {
                        for v in &mut col[out_row..out_row + d.wo] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let in_row = chan + iy as usize * d.w;
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        col[out_row + ox] = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            input[in_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` (kdim × ndim) back into the input-gradient sample.
fn col2im_add<T: Real>(col: &[T], d: &ConvDims, bi: usize, gi: usize, gin: &mut [T]) {
    let (cg, k, n) = (d.cin_g(), d.k, d.ndim());
    for c in 0..cg {
        let chan = (bi * d.cin + gi * cg + c) * d.h * d.w;
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let in_row = chan + iy as usize * d.w;
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            gin[in_row + ix as usize] += col[row + oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Convolution of a (B, C_in, H, W) input with (C_out, C_in/groups, k, k)
    /// weights; zero padding, square kernel and stride. Output extent is
    /// `floor((H + 2·pad − k)/stride) + 1` per spatial axis.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let (b, cin, h, w) = input.dims4()?;
        let (cout, wc, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {}x{}", kh, kw),
            ));
        }
        let k = kh;
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
        }
        if groups == 0 || cin % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("in_channels {} not divisible by groups {}", cin, groups),
            ));
        }
        if cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("out_channels {} not divisible by groups {}", cout, groups),
            ));
        }
        if wc != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight dimension 1 is {}, expected in_channels/groups = {}",
                    wc,
                    cin / groups
                ),
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} exceeds padded input {}x{}", k, h + 2 * pad, w + 2 * pad),
            ));
        }
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", bt.shape(), cout),
                ));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let d = ConvDims {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            groups,
            ho,
            wo,
        };

        let xv = self.value_rc(input);
        let wv = self.value_rc(weight);
        let bv = bias.map(|t| self.value_rc(t));

        let (kdim, ndim, cout_g) = (d.kdim(), d.ndim(), d.cout_g());
        let sample = cout * ndim;
        let mut out = vec![T::zero(); b * sample];
        {
            let xs: &[T] = &xv;
            let ws: &[T] = &wv;
            let bs: Option<&[T]> = bv.as_deref().map(|v| v.as_slice());
            out.par_chunks_mut(sample).enumerate().for_each(|(bi, os)| {
                if let Some(bvals) = bs {
                    for oc in 0..cout {
                        let base = oc * ndim;
                        for v in &mut os[base..base + ndim] {
                            *v = bvals[oc];
                        }
                    }
                }
                let mut col = vec![T::zero(); kdim * ndim];
                for gi in 0..groups {
                    im2col(xs, &d, bi, gi, &mut col);
                    let wg = &ws[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                    let og = &mut os[gi * cout_g * ndim..(gi + 1) * cout_g * ndim];
                    gemm_acc(cout_g, kdim, ndim, wg, &col, og);
                }
            });
        }

        let (idx, idw, idb) = (input.id, weight.id, bias.map(|t| t.id));
        let mut parents: Vec<&Tensor> = vec![input, weight];
        if let Some(bt) = bias {
            parents.push(bt);
        }
        Ok(self.op_result(
            out,
            vec![b, cout, ho, wo],
            &parents,
            move |dout, sink| {
                // Input gradient: per-sample col gradients scattered back.
                sink.acc(idx, |gin| {
                    let ws: &[T] = &wv;
                    let mut wt = vec![T::zero(); cout_g * kdim * groups];
                    for gi in 0..groups {
                        transpose(
                            &ws[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                            cout_g,
                            kdim,
                            &mut wt[gi * kdim * cout_g..(gi + 1) * kdim * cout_g],
                        );
                    }
                    let wt = &wt;
                    let per_in = cin * h * w;
                    gin.par_chunks_mut(per_in).enumerate().for_each(|(bi, gs)| {
                        let mut dcol = vec![T::zero(); kdim * ndim];
                        for gi in 0..groups {
                            for v in dcol.iter_mut() {
                                *v = T::zero();
                            }
                            let dog = &dout[(bi * cout + gi * cout_g) * ndim
                                ..(bi * cout + (gi + 1) * cout_g) * ndim];
                            gemm_acc(
                                kdim,
                                cout_g,
                                ndim,
                                &wt[gi * kdim * cout_g..(gi + 1) * kdim * cout_g],
                                dog,
                                &mut dcol,
                            );
                            // gs is one sample; index it with bi = 0
                            col2im_add(&dcol, &d, 0, gi, gs);
                        }
                    });
                });
                // Weight gradient: per-sample partials, summed in batch order.
                sink.acc(idw, |gw| {
                    let xs: &[T] = &xv;
                    let wlen = gw.len();
                    let partials: Vec<Vec<T>> = (0..b)
                        .into_par_iter()
                        .map(|bi| {
                            let mut col = vec![T::zero(); kdim * ndim];
                            let mut colt = vec![T::zero(); ndim * kdim];
                            let mut part = vec![T::zero(); wlen];
                            for gi in 0..groups {
                                im2col(xs, &d, bi, gi, &mut col);
                                transpose(&col, kdim, ndim, &mut colt);
                                let dog = &dout[(bi * cout + gi * cout_g) * ndim
                                    ..(bi * cout + (gi + 1) * cout_g) * ndim];
                                gemm_acc(
                                    cout_g,
                                    ndim,
                                    kdim,
                                    dog,
                                    &colt,
                                    &mut part[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                                );
                            }
                            part
                        })
                        .collect();
                    for part in partials {
                        for (g, p) in gw.iter_mut().zip(part) {
                            *g += p;
                        }
                    }
                });
                if let Some(idb) = idb {
                    sink.acc(idb, |gb| {
                        for bi in 0..b {
                            for oc in 0..cout {
                                let base = (bi * cout + oc) * ndim;
                                let s: T = dout[base..base + ndim].iter().copied().sum();
                                gb[oc] += s;
                            }
                        }
                    });
                }
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0; 9], vec![1, 1, 3, 3]).unwrap();
        let w = g.leaf(vec![1.0; 9], vec![1, 1, 3, 3]).unwrap();
        let y = g.conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(&y), &[9.0]);
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.5 - 7.0).collect();
        let x = g.leaf(data.clone(), vec![2, 3, 4, 5]).unwrap();
        // block-diagonal identity: each output channel copies its input channel
        let mut wdat = vec![0.0; 3 * 3];
        for c in 0..3 {
            wdat[c * 3 + c] = 1.0;
        }
        let w = g.leaf(wdat, vec![3, 3, 1, 1]).unwrap();
        let y = g.conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(g.value(&y), &data[..]);
    }

    #[test]
    fn depthwise_matches_naive_quadruple_loop() {
        // groups == in_ch == out_ch: per-channel 2-D correlation.
        let mut rngstate = 0x243f6a88u64;
        let mut next = move || {
            rngstate = rngstate.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rngstate >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let (b, c, h, w, k, pad, stride) = (2, 3, 6, 5, 3, 1, 2);
        let x: Vec<f64> = (0..b * c * h * w).map(|_| next()).collect();
        let wt: Vec<f64> = (0..c * k * k).map(|_| next()).collect();

        let mut g: Graph<f64> = Graph::new();
        let xt = g.leaf(x.clone(), vec![b, c, h, w]).unwrap();
        let wtt = g.leaf(wt.clone(), vec![c, 1, k, k]).unwrap();
        let y = g.conv2d(&xt, &wtt, None, stride, pad, c).unwrap();

        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut expect = vec![0.0; b * c * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    s += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[(ci * k + ky) * k + kx];
                                }
                            }
                        }
                        expect[((bi * c + ci) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        for (a, e) in g.value(&y).iter().zip(expect.iter()) {
            assert!((a - e).abs() <= 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn rejects_bad_group_split() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0; 3 * 4], vec![1, 3, 2, 2]).unwrap();
        let w = g.leaf(vec![0.0; 4], vec![4, 1, 1, 1]).unwrap();
        let err = g.conv2d(&x, &w, None, 1, 0, 2).unwrap_err();
        assert!(err.to_string().contains("in_channels 3"), "{err}");
    }
}
