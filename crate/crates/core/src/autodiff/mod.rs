//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operator records its parents and a backward rule on the output
//! tensor. [`backward`] walks the recorded graph in reverse topological order
//! and accumulates gradients into the leaves that require them. A graph is
//! single-threaded (`Rc`), which matches the one-thread-per-training-step
//! model; evaluation can use [`Tensor::detach`]ed copies.

mod adam;
mod checkpoint;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    read_checkpoint, save_checkpoint, load_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use ops::{
    add, class_means, conv2d, global_avg_pool, linear, maxpool2, mul, neg_sq_distances, relu,
    slice_rows, softmax_cross_entropy, sum,
};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("labels do not form {classes} classes of equal size: {detail}")]
    UnbalancedLabels { classes: usize, detail: String },
    #[error("optimizer state count {states} does not match parameter count {params}")]
    StateCountMismatch { params: usize, states: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardRule = Box<dyn Fn(&[f64], &[Tensor])>;

struct Recorded {
    parents: Vec<Tensor>,
    rule: BackwardRule,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Recorded>,
}

/// Shared handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Recorded>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Constant tensor; gradients are never accumulated into it.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Self {
        Self::build(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value])
    }

    /// Records an operator output. Parents that do not require gradients are
    /// kept out of the graph entirely.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        rule: BackwardRule,
    ) -> Self {
        if parents.iter().any(Tensor::requires_grad) {
            Self::build(shape, data, true, Some(Recorded { parents, rule }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on a tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Overwrites the values in place; used by optimizers and tests.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Copy of the values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(&self.0.shape, self.to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
            && self
                .0
                .grad
                .borrow()
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [f64])) {
        let mut slot = self.0.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.len()]);
        f(g);
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }
}

/// Nodes reachable from `root`, parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<*const Node> = HashSet::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.key()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for p in &op.parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Back-propagates from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed from scratch every time.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let order = topo_order(loss);
    for t in &order {
        if t.0.op.is_some() {
            *t.0.grad.borrow_mut() = None;
        }
    }
    loss.accumulate_grad(|g| g[0] += 1.0);
    for t in order.iter().rev() {
        let Some(op) = &t.0.op else { continue };
        let grad = t.0.grad.borrow();
        if let Some(g) = grad.as_ref() {
            (op.rule)(g, &op.parents);
        }
    }
    Ok(())
}
