//! Reverse-mode gradient tape.
//!
//! Forward operations append nodes to a [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse recording order and consumes the tape. A second
//! `backward` on the same tape is a [`Error::Contract`] error: gradients are
//! never silently recomputed or double-counted.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps the gradient of a node's output to one gradient per parent, in the
/// order the parents were recorded.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    check_finite: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// A handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, node.op, node.value.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that validates every recorded value and reports the first op
    /// that produces a NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Tape {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf; it receives a gradient from `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push("leaf", Rc::new(value), Vec::new(), true, None)
    }

    /// A constant; no gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push("constant", Rc::new(value), Vec::new(), false, None)
    }

    /// Records the output of an operation with a backward rule.
    ///
    /// The rule is dropped without being stored when no parent participates
    /// in gradient computation.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var<'t>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let ids: Vec<usize> = parents
            .iter()
            .map(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "mixing tapes");
                p.id
            })
            .collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(op, Rc::new(value), ids, requires_grad, backward))
    }

    fn push(
        &self,
        op: &'static str,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a scalar loss and returns the gradient of every
    /// leaf that the loss depends on. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, grad);
                }
                Some(rule) => {
                    let parent_grads = rule(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        if !nodes[pid].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(
                            pg.shape(),
                            nodes[pid].value.shape(),
                            "gradient shape from `{}`",
                            node.op
                        );
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    /// `None` when the loss does not depend on `var`.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
