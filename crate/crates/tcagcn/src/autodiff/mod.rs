//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] is an arena of nodes in execution order, so node order is
//! already topological. Each non-leaf node carries a backward closure that
//! owns copies of whatever forward values it needs; there is no view aliasing
//! across the tape. [`Var`] is a copyable handle (tape reference + index).
//!
//! A tape is confined to one thread. Run independent samples on independent
//! tapes if you want parallelism.

pub mod gradcheck;
pub mod ops;

pub use ops::{Activation, BnMode};

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adjoint contributions for the node's parents: (parent id, gradient).
type BackFn = Box<dyn FnOnce(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf. Trainable parameters set `requires_grad`; inputs and
    /// constants do not.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, requires_grad: bool, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            back,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Fill adjoints of every `requires_grad` node reachable from `loss`.
    ///
    /// `loss` must be a single value. Calling twice on one tape is an error,
    /// as is a loss with no `requires_grad` ancestry (a detached graph).
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss lives on another tape");
        if self.backward_done.get() {
            return Err(Error::validation(
                "backward already ran on this tape; build a fresh tape per step",
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        {
            let ln = &nodes[loss.id];
            if ln.value.numel() != 1 {
                return Err(Error::validation(format!(
                    "backward needs a scalar loss, got shape {}",
                    crate::tensor::fmt_shape(ln.value.shape())
                )));
            }
            if !ln.requires_grad {
                return Err(Error::validation(
                    "loss is detached: no parameter with requires_grad feeds it",
                ));
            }
        }
        self.backward_done.set(true);
        let seed_shape = nodes[loss.id].value.shape().to_vec();
        nodes[loss.id].grad = Some(Tensor::full(&seed_shape, 1.0));
        for id in (0..=loss.id).rev() {
            if nodes[id].grad.is_none() || !nodes[id].requires_grad {
                continue;
            }
            let Some(back) = nodes[id].back.take() else {
                continue;
            };
            let grad = nodes[id].grad.take().expect("grad present");
            let contributions = back(&grad);
            nodes[id].grad = Some(grad);
            for (pid, g) in contributions {
                debug_assert!(pid < id, "tape order violated");
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut nodes[pid].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Accumulated adjoint of `v`, if backward reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Read the forward value without cloning.
    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }
}

pub(crate) fn same_tape<'t>(a: Var<'t>, b: Var<'t>) -> &'t Tape {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "operands live on different tapes"
    );
    a.tape
}
