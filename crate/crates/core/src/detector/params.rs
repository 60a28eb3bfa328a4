//! Named parameter registry and batch-norm running statistics.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub kind: ParamKind,
}

/// Trainable parameters in registration order. Registration order is the
/// initialization RNG consumption order, so builds are reproducible.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Real> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<T>,
        kind: ParamKind,
    ) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
            kind,
        });
        self.entries.len() - 1
    }

    /// Uniform init in +-sqrt(1/fan_in).
    pub fn register_conv_weight(
        &mut self,
        name: impl Into<String>,
        cout: usize,
        cin_per_group: usize,
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> usize {
        let fan_in = (cin_per_group * k * k) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let n = cout * cin_per_group * k * k;
        let data: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.register(name, vec![cout, cin_per_group, k, k], data, ParamKind::ConvWeight)
    }

    /// Bind every parameter into the graph, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|e| {
                if trainable {
                    g.leaf(e.data.clone(), e.shape.clone())
                } else {
                    g.constant(e.data.clone(), e.shape.clone())
                }
            })
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Running mean/variance per batch-norm layer, in registration order.
#[derive(Debug, Clone)]
pub struct BnState<T: Real> {
    pub entries: Vec<BnEntry<T>>,
}

impl<T: Real> Default for BnState<T> {
    fn default() -> Self {
        BnState { entries: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct BnEntry<T: Real> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnState<T> {
    pub fn register(&mut self, name: impl Into<String>, channels: usize) -> usize {
        self.entries.push(BnEntry {
            name: name.into(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        self.entries.len() - 1
    }

    /// Exponential moving average update with the given momentum.
    pub fn update(&mut self, idx: usize, mean: &[T], var: &[T], momentum: T) {
        let e = &mut self.entries[idx];
        let keep = T::one() - momentum;
        for (r, &m) in e.mean.iter_mut().zip(mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in e.var.iter_mut().zip(var) {
            *r = keep * *r + momentum * v;
        }
    }
}

/// Everything a block needs during one forward pass.
pub struct ForwardCtx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub leaves: &'a [Tensor],
    pub bn: &'a mut BnState<T>,
    pub training: bool,
    pub bn_momentum: T,
    pub bn_eps: T,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn leaf(&self, idx: usize) -> Result<&Tensor> {
        self.leaves
            .get(idx)
            .ok_or_else(|| Error::Invalid(format!("parameter leaf {} not bound", idx)))
    }
}
