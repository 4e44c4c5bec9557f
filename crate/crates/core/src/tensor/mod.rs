//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once written by an op. Every differentiable
//! operation records the tensors it consumed plus a gradient rule; calling
//! [`backward`] on a scalar loss replays those rules in reverse topological
//! order and deposits gradients on every `requires_grad` tensor that
//! contributed to the loss.
//!
//! Storage and arithmetic are f64. Persistent training state is rounded to
//! f32-representable values by the optimizer so that checkpoints (which hold
//! f32) round-trip bit-exactly.

mod conv;
mod gradcheck;
mod ops;
mod pool;

pub use conv::{conv3d, ConvSpec};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use ops::{
    add, batch_norm, concat, leaky_relu, linear, mean_all, mul, powf_elem, relu, reshape, scale,
    sigmoid, slice, sub, sum_all, BnParams, BnStats,
};
pub use pool::{avg_pool3d, max_pool3d};

use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` with gradient recording disabled on this thread.
///
/// Evaluation-mode forward passes build no graph and keep no parents alive.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// Tensors consumed by the op that produced this node; empty for leaves.
    parents: Vec<Tensor>,
    /// Gradient rule: receives d(loss)/d(this node) and accumulates into parents.
    backward: Option<BackwardFn>,
}

/// Dense N-dimensional real array with shape metadata.
///
/// Cloning is cheap (reference-counted). Data is immutable after creation.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.node.shape, self.node.requires_grad
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Leaf tensor from row-major data. Does not track gradients.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("from_vec", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: Rc::new(data),
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Leaf parameter tensor that accumulates gradients.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(t.requires_grad(true))
    }

    /// All-zero leaf tensor.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros: positive extents")
    }

    /// Single-element scalar tensor.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    /// Copy of this tensor as a fresh leaf with the given grad flag.
    pub fn requires_grad(&self, flag: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape: self.node.shape.clone(),
                data: Rc::clone(&self.node.data),
                requires_grad: flag,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Cut this tensor out of the graph: same data, no history, no grad.
    pub fn detach(&self) -> Tensor {
        self.requires_grad(false)
    }

    /// Internal constructor for op outputs.
    ///
    /// `make_backward` is only invoked when recording is on and some parent
    /// requires a gradient; it receives the output data for rules that need it.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        make_backward: impl FnOnce(Rc<Vec<f64>>) -> BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "from_op shape/data mismatch");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by an op"
        );
        let data = Rc::new(data);
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        let (parents, backward) = if track {
            let parents: Vec<Tensor> = parents.iter().map(|&p| p.clone()).collect();
            let bw = make_backward(Rc::clone(&data));
            (parents, Some(bw))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data,
                requires_grad: track,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.node.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.node.data[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if backward deposited one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Like [`Self::accumulate_grad`] but takes ownership, avoiding a copy
    /// when this is the first contribution.
    pub(crate) fn accumulate_grad_owned(&self, contrib: Vec<f64>) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib),
        }
    }

    fn id(&self) -> u64 {
        self.node.id
    }
}

/// Run reverse-mode differentiation from a scalar loss.
///
/// Deposits `d(loss)/d(t)` on every `requires_grad` tensor `t` reachable from
/// the loss. Gradients accumulate additively across multiple uses of a
/// tensor. Intermediate (non-leaf) gradients are released once consumed.
pub fn backward(loss: &Tensor) -> Result<()> {
    if !loss.is_scalar() {
        return Err(Error::shape(
            "backward",
            format!("loss must be scalar, got shape {:?}", loss.shape()),
        ));
    }

    // Iterative DFS post-order gives a deterministic topological order.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((t, child_idx)) = stack.pop() {
        if child_idx < t.node.parents.len() {
            let next = t.node.parents[child_idx].clone();
            stack.push((t, child_idx + 1));
            if visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }

    loss.accumulate_grad(&[1.0]);
    for t in order.iter().rev() {
        if let Some(bw) = &t.node.backward {
            // Move the gradient out: once this node's rule has consumed it,
            // nothing reads it again.
            let grad = t.node.grad.borrow_mut().take();
            if let Some(grad) = grad {
                bw(&grad);
            }
        }
    }
    Ok(())
}
