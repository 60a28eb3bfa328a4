//! Elementwise primitives, scalar ops and reductions.

use super::{same_shape, Graph, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    fn binary(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        fwd: impl Fn(T, T) -> T,
        // (dOut, a, b) -> (dA, dB) per element
        bwd: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Tensor> {
        same_shape(op, a, b)?;
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let out: Vec<T> = av.iter().zip(bv.iter()).map(|(&x, &y)| fwd(x, y)).collect();
        let (ida, idb) = (a.id, b.id);
        Ok(self.op_result(out, a.shape.clone(), &[a, b], move |dout, sink| {
            sink.acc(ida, |ga| {
                for i in 0..dout.len() {
                    ga[i] += bwd(dout[i], av[i], bv[i]).0;
                }
            });
            sink.acc(idb, |gb| {
                for i in 0..dout.len() {
                    gb[i] += bwd(dout[i], av[i], bv[i]).1;
                }
            });
        }))
    }

    fn unary(
        &mut self,
        a: &Tensor,
        fwd: impl Fn(T) -> T,
        // (dOut, x, y) -> dX, where y = fwd(x)
        bwd: impl Fn(T, T, T) -> T + 'static,
    ) -> Tensor {
        let av = self.value_rc(a);
        let out: Vec<T> = av.iter().map(|&x| fwd(x)).collect();
        let yv = std::rc::Rc::new(out.clone());
        let ida = a.id;
        self.op_result(out, a.shape.clone(), &[a], move |dout, sink| {
            sink.acc(ida, |ga| {
                for i in 0..dout.len() {
                    ga[i] += bwd(dout[i], av[i], yv[i]);
                }
            });
        })
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |d, _, _| (d, d))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |d, _, _| (d, -d))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |d, x, y| (d * y, d * x))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |d, x, y| (d / y, -d * x / (y * y)),
        )
    }

    /// Elementwise maximum; gradient routes to the winner (first operand on ties).
    pub fn max_elem(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(
            "max_elem",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            |d, x, y| {
                if x >= y {
                    (d, T::zero())
                } else {
                    (T::zero(), d)
                }
            },
        )
    }

    /// Elementwise minimum; gradient routes to the winner (first operand on ties).
    pub fn min_elem(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(
            "min_elem",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            |d, x, y| {
                if x <= y {
                    (d, T::zero())
                } else {
                    (T::zero(), d)
                }
            },
        )
    }

    pub fn scale(&mut self, a: &Tensor, c: T) -> Tensor {
        self.unary(a, move |x| x * c, move |d, _, _| d * c)
    }

    pub fn add_const(&mut self, a: &Tensor, c: T) -> Tensor {
        self.unary(a, move |x| x + c, |d, _, _| d)
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.scale(a, -T::one())
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |d, x, _| if x > T::zero() { d } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, sigmoid_t, |d, _, y| d * y * (T::one() - y))
    }

    /// SiLU / swish: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: &Tensor) -> Tensor {
        self.unary(
            a,
            |x| x * sigmoid_t(x),
            |d, x, _| {
                let s = sigmoid_t(x);
                d * (s + x * s * (T::one() - s))
            },
        )
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x.exp(), |d, _, y| d * y)
    }

    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x.ln(), |d, x, _| d / x)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Tensor {
        self.unary(
            a,
            |x| x.sqrt(),
            |d, _, y| d / (y + y),
        )
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let av = self.value_rc(a);
        let s: T = av.iter().copied().sum();
        let ida = a.id;
        let n = av.len();
        Ok(self.op_result(vec![s], vec![1], &[a], move |dout, sink| {
            let d = dout[0];
            sink.acc(ida, |ga| {
                for g in ga.iter_mut().take(n) {
                    *g += d;
                }
            });
        }))
    }

    /// Arithmetic mean of all elements, as a 1-element tensor.
    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel();
        let s = self.sum_all(a)?;
        Ok(self.scale(&s, T::one() / T::from_usize(n).unwrap()))
    }

    /// Per-sample sum: collapses every axis except the leading (batch) one.
    pub fn sum_samplewise(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape.is_empty() {
            return Err(Error::shape("sum_samplewise", "scalar input"));
        }
        let b = a.shape[0];
        let per = a.numel() / b;
        let av = self.value_rc(a);
        let out: Vec<T> = (0..b)
            .map(|i| av[i * per..(i + 1) * per].iter().copied().sum())
            .collect();
        let ida = a.id;
        Ok(self.op_result(out, vec![b], &[a], move |dout, sink| {
            sink.acc(ida, |ga| {
                for (i, &d) in dout.iter().enumerate() {
                    for g in &mut ga[i * per..(i + 1) * per] {
                        *g += d;
                    }
                }
            });
        }))
    }

    /// Sum of a list of same-shape tensors (fixed fold order).
    pub fn add_n(&mut self, terms: &[Tensor]) -> Result<Tensor> {
        let mut it = terms.iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Invalid("add_n: empty term list".into()))?;
        let mut acc = first.clone();
        for t in it {
            acc = self.add(&acc, t)?;
        }
        Ok(acc)
    }
}

pub(crate) fn sigmoid_t<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_shapes_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let b = g.leaf(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let err = g.add(&a, &b).unwrap_err();
        assert!(err.to_string().contains("[2]"), "diagnostic: {err}");
    }

    #[test]
    fn div_matches_scalar_math() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0, -4.0], vec![2]).unwrap();
        let b = g.leaf(vec![2.0, 8.0], vec![2]).unwrap();
        let q = g.div(&a, &b).unwrap();
        assert_eq!(g.value(&q), &[0.5, -0.5]);
    }

    #[test]
    fn sum_samplewise_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g
            .leaf((1..=12).map(f64::from).collect(), vec![2, 2, 3])
            .unwrap();
        let s = g.sum_samplewise(&a).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(g.value(&s), &[21.0, 57.0]);
    }
}
