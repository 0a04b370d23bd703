//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and records the node needed to run the
//! chain rule later. Graphs are rebuilt per forward pass; leaves (parameters)
//! persist across passes and collect gradients in their `grad` slot.

mod fd;
mod gradtests;
mod ops;

pub use fd::{finite_difference, max_relative_error};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward root must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// True if a gradient must flow into or through this tensor.
    needs_grad: bool,
    op: Option<ops::Op>,
}

/// Shared handle to a dense tensor. Cloning copies the handle, not the data.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) {
    let numel: usize = shape.iter().product();
    assert_eq!(numel, len, "data length {len} != shape {shape:?} product");
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<ops::Op>) -> Self {
        check_len(&shape, data.len());
        let needs_grad = requires_grad
            || op
                .as_ref()
                .map(|o| o.inputs().iter().any(|t| t.inner.needs_grad))
                .unwrap_or(false);
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: ops::Op) -> Self {
        Tensor::new(shape, data, false, Some(op))
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Self {
        Tensor::new(shape.to_vec(), data, false, None)
    }

    /// Trainable leaf; gradients accumulate in its `grad` slot.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Self {
        Tensor::new(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::constant(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::constant(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() on non-scalar tensor");
        data[0]
    }

    /// Overwrite leaf values in place. Only meaningful on leaves: op nodes
    /// cache their output at construction and are never re-evaluated.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// Apply `f` to the value buffer in place (used by optimizer updates).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode backward from a scalar root. Gradients accumulate into
    /// every `requires_grad` ancestor; call [`Tensor::zero_grad`] on leaves
    /// between passes to get fresh values.
    pub fn backward(&self) -> Result<(), DiffError> {
        if self.numel() != 1 {
            return Err(DiffError::NotScalar(self.shape().to_vec()));
        }
        if !self.inner.needs_grad {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(op) = &t.inner.op else { continue };
            let out_grad = t
                .inner
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            op.backward(t, &out_grad);
            // Interior grads are scratch space; only leaves keep theirs.
            if !t.inner.requires_grad {
                *t.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    /// Post-order over the subgraph that needs gradients; each node appears
    /// exactly once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.inner.op {
                for input in op.inputs() {
                    if input.inner.needs_grad && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
