//! Central finite-difference gradient verification, 64-bit throughout.

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Initial value of one differentiable leaf handed to a gradcheck builder.
#[derive(Debug, Clone)]
pub struct LeafSpec {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl LeafSpec {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        LeafSpec { data, shape }
    }
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences for every entry of every leaf. Returns the maximum of
/// `|analytic - fd| / max(1, |fd|)`.
///
/// The builder must be deterministic: it is re-invoked with perturbed leaf
/// data for each difference quotient.
pub fn gradcheck<F>(leaves: &[LeafSpec], build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    let eval = |data: &[Vec<f64>], record: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g: Graph<f64> = if record {
            Graph::new()
        } else {
            Graph::inference()
        };
        let handles: Vec<Tensor> = leaves
            .iter()
            .zip(data.iter())
            .map(|(spec, d)| g.leaf(d.clone(), spec.shape.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &handles)?;
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let lv = g.scalar_value(&loss);
        if !lv.is_finite() {
            return Err(Error::NonFinite("gradcheck loss value".into()));
        }
        if !record {
            return Ok((lv, None));
        }
        g.backward(&loss)?;
        let grads = handles
            .iter()
            .enumerate()
            .map(|(li, h)| {
                let gr = g
                    .grad(h)
                    .ok_or_else(|| Error::Invalid(format!("gradcheck: leaf {} has no grad", li)))?
                    .to_vec();
                if let Some(pos) = gr.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "analytic gradient of leaf {} entry {}",
                        li, pos
                    )));
                }
                Ok(gr)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((lv, Some(grads)))
    };

    let base: Vec<Vec<f64>> = leaves.iter().map(|l| l.data.clone()).collect();
    let (_, analytic) = eval(&base, true)?;
    let analytic = analytic.expect("recorded eval returns grads");

    let mut max_err = 0.0f64;
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].data.len() {
            let mut plus = base.clone();
            plus[li][ei] += step;
            let (fp, _) = eval(&plus, false)?;
            let mut minus = base.clone();
            minus[li][ei] -= step;
            let (fm, _) = eval(&minus, false)?;
            let fd = (fp - fm) / (2.0 * step);
            if !fd.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference at leaf {} entry {}",
                    li, ei
                )));
            }
            let err = (analytic[li][ei] - fd).abs() / fd.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
