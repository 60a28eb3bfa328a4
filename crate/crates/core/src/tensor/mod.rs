//! Dense-tensor arithmetic with taped reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as a flat tape of nodes; insertion
//! order is the topological order, so [`Graph::backward`] is a single reverse
//! sweep that visits each node at most once. Tensors are lightweight handles
//! (node id + shape) into the graph that created them. Graphs are rebuilt for
//! every forward pass and never shared across threads.
//!
//! Layout convention: row-major, width fastest; 4-D tensors are
//! (batch, channel, height, width).

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod pool;
mod structural;

pub use gradcheck::{gradcheck, LeafSpec};

use std::fmt::Debug;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, NumAssignOps};

use crate::error::{Error, Result};

/// Scalar element type for tensors: implemented by `f32` and `f64`.
pub trait Real:
    Float + NumAssignOps + FromPrimitive + std::iter::Sum + Send + Sync + Debug + 'static
{
    /// Narrowing conversion from `f64`.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Dimensions of a 4-D tensor as (batch, channels, height, width).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(
                "dims4",
                format!("expected 4-D tensor, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }
}

/// Accumulates gradients for parent nodes during the backward sweep.
pub(crate) struct GradSink<'a, T: Real> {
    grads: &'a mut [Option<Vec<T>>],
    lens: &'a [usize],
    needs: &'a [bool],
}

impl<'a, T: Real> GradSink<'a, T> {
    /// Run `f` against the (zero-initialized) gradient buffer of node `id`.
    /// No-op when nothing upstream of `id` requires a gradient.
    pub(crate) fn acc(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        if !self.needs[id] {
            return;
        }
        let buf = self.grads[id].get_or_insert_with(|| vec![T::zero(); self.lens[id]]);
        f(buf);
    }
}

type BackFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T: Real> {
    value: Rc<Vec<T>>,
    requires_grad: bool,
    is_leaf: bool,
    back: Option<BackFn<T>>,
}

/// Tape of one forward pass. Single-threaded by construction.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Graph that records backward closures (training / gradient checks).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// Forward-only graph: no closures are stored and backward is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: false,
            backward_done: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(
        &mut self,
        value: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        is_leaf: bool,
        back: Option<BackFn<T>>,
    ) -> Tensor {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = requires_grad && self.recording;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            is_leaf,
            back: if requires_grad { back } else { None },
        });
        Tensor { id, shape }
    }

    /// Leaf participating in differentiation.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Tensor> {
        check_numel("leaf", data.len(), &shape)?;
        Ok(self.push(data, shape, true, true, None))
    }

    /// Leaf excluded from differentiation (inputs, targets, lookup tables).
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Tensor> {
        check_numel("constant", data.len(), &shape)?;
        Ok(self.push(data, shape, false, true, None))
    }

    pub fn scalar(&mut self, v: T) -> Tensor {
        self.push(vec![v], vec![1], false, true, None)
    }

    /// Internal constructor for op outputs.
    pub(crate) fn op_result(
        &mut self,
        value: Vec<T>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        back: impl Fn(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Tensor {
        let requires = self.recording && parents.iter().any(|p| self.nodes[p.id].requires_grad);
        let back: Option<BackFn<T>> = if requires { Some(Box::new(back)) } else { None };
        self.push(value, shape, requires, false, back)
    }

    pub fn value(&self, t: &Tensor) -> &[T] {
        &self.nodes[t.id].value
    }

    pub(crate) fn value_rc(&self, t: &Tensor) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes[t.id].value)
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: &Tensor) -> T {
        debug_assert_eq!(t.numel(), 1);
        self.nodes[t.id].value[0]
    }

    pub fn requires_grad(&self, t: &Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Force gradient tracking for an interior node that was produced without
    /// it (e.g. probing activations under frozen weights). Must be called
    /// before any op consuming `t` is recorded.
    pub fn mark_probe(&mut self, t: &Tensor) {
        if self.recording {
            self.nodes[t.id].requires_grad = true;
        }
    }

    /// Reverse sweep from a scalar loss. Rejects repeated invocation.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape.clone()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let lens: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let needs: Vec<bool> = self.nodes.iter().map(|nd| nd.requires_grad).collect();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if let Some(back) = self.nodes[id].back.take() {
                let mut sink = GradSink {
                    grads: &mut self.grads,
                    lens: &lens,
                    needs: &needs,
                };
                back(&g, &mut sink);
            }
            self.grads[id] = Some(g);
        }
        // Leaves that require a gradient but were never reached hold zeros.
        for id in 0..n {
            if self.nodes[id].requires_grad && self.nodes[id].is_leaf && self.grads[id].is_none() {
                self.grads[id] = Some(vec![T::zero(); lens[id]]);
            }
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. `t`; `None` when backward has not run or
    /// the node neither required nor received a gradient.
    pub fn grad(&self, t: &Tensor) -> Option<&[T]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

pub(crate) fn check_numel(op: &'static str, len: usize, shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            op,
            format!("shape {:?} implies {} elements, data has {}", shape, n, len),
        ));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(op, format!("zero extent in shape {:?}", shape)));
    }
    Ok(())
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}
