//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation records its inputs and a backward rule on
//! the tensor it produces. [`Tensor::backward`] walks the recorded graph in
//! reverse creation order (creation order is a topological order, since
//! inputs always exist before outputs) and accumulates gradients into every
//! leaf marked `requires_grad`.
//!
//! Kernels are deterministic: identical inputs produce bit-identical outputs,
//! and all reductions run in a fixed order.

mod conv;
mod fd;
mod ops;
mod resize;

pub use fd::finite_diff_grad;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::elem::Elem;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[E])>;

struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// Dense n-dimensional array (row-major, last index fastest) participating in
/// a reverse-mode differentiation graph.
///
/// Cloning is cheap and shares the underlying storage; data is immutable
/// after construction except through [`Tensor::set_data`] (used by the
/// optimizer, which holds exclusive access) and gradient accumulation.
pub struct Tensor<E: Elem> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    fn construct(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor; `requires_grad` marks it as a differentiation target.
    pub fn leaf(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension {
                op: "leaf",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Dimension {
                op: "leaf",
                detail: format!("shape {:?} does not match data length {}", shape, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(Self::construct(shape, data, requires_grad, Vec::new(), None))
    }

    /// Trainable leaf.
    pub fn parameter(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::construct(shape, vec![E::zero(); n], false, Vec::new(), None)
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = shape.iter().product();
        Self::construct(shape, vec![value; n], false, Vec::new(), None)
    }

    pub fn scalar(value: E) -> Self {
        Self::construct(vec![1], vec![value], false, Vec::new(), None)
    }

    /// Interior node produced by an op. Checks finiteness of the forward
    /// result; the graph edge is dropped when no parent needs gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Ok(Self::construct(shape, data, true, parents, Some(backward)))
        } else {
            Ok(Self::construct(shape, data, false, Vec::new(), None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Copy of the tensor's contents.
    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Replace the stored values. Only the optimizer and checkpoint loader
    /// call this; callers must hold exclusive access to the graph.
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::Dimension {
                op: "set_data",
                detail: format!("expected {} elements, got {}", self.numel(), data.len()),
            });
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[E]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + *c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Run the backward pass from a scalar root, accumulating `d root / d leaf`
    /// into every reachable `requires_grad` leaf. Gradients sum across
    /// multiple consumers of the same tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", self.shape()),
            });
        }
        // Collect reachable nodes; creation ids give a topological order.
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        self.accumulate_grad(&[E::one()]);
        for node in &nodes {
            if let Some(bw) = &node.inner.backward {
                let grad_out = {
                    let g = node.inner.grad.borrow();
                    match g.as_ref() {
                        Some(g) => g.clone(),
                        None => continue,
                    }
                };
                bw(node, &grad_out);
                // Interior gradients are scratch; free them.
                node.zero_grad();
            }
        }
        Ok(())
    }
}
