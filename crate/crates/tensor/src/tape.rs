//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and a closure
//! that maps the output adjoint onto the adjoints of its inputs. Nodes are
//! appended in execution order, so walking the list backwards is a reverse
//! topological order of the forward computation.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Adjoint accumulator handed to each node's backward closure.
pub(crate) struct GradSink {
    grads: Vec<Option<Tensor>>,
}

impl GradSink {
    pub(crate) fn accumulate(&mut self, id: usize, grad: Tensor) {
        match &mut self.grads[id] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Accumulates `grad` produced lazily into the slot of `id`.
    pub(crate) fn accumulate_with(&mut self, id: usize, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        let slot = self.grads[id].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }
}

/// Records operations on [`Var`]s and replays their adjoints.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, None)
    }

    pub(crate) fn push(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// A tape may be backpropagated once; [`Tape::reset_grads`] re-arms it.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check(loss)?;
        if self.consumed.get() {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        if root.requires_grad {
            sink.grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        }
        for id in (0..=loss.id).rev() {
            let Some(grad) = sink.grads[id].take() else {
                continue;
            };
            if let Some(backward) = &nodes[id].backward {
                backward(&grad, &mut sink);
            }
            sink.grads[id] = Some(grad);
        }
        *self.grads.borrow_mut() = Some(sink.grads);
        self.consumed.set(true);
        Ok(())
    }

    /// Clears stored gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
        self.consumed.set(false);
    }

    /// Gradient of the last backward pass with respect to `var`.
    ///
    /// Returns `None` when `var` does not require a gradient or no backward
    /// pass has run; a requires-grad node unreachable from the loss gets zeros.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        if self.check(var).is_err() || !self.requires_grad_of(var.id) {
            return None;
        }
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        Some(match grads.get(var.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(self.value_of(var.id).shape()),
        })
    }

    pub(crate) fn check(&self, var: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub(crate) fn same_tape(&self, other: Var<'_>) -> Result<()> {
        self.tape.check(other)
    }
}
