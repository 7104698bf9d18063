//! Reverse-mode autodiff tape.
//!
//! Operations are recorded in execution order, so node ids are already a
//! topological order and the backward sweep is a single reverse scan.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Computes input gradients from the output gradient. The mask says which
/// inputs actually need one; unneeded slots may be returned as `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn>,
}

/// A value on (or off) a tape.
///
/// `node` is `None` for constants and for anything produced while gradient
/// recording is disabled.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeId>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy of the value.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that never records; every op returns a constant.
    pub fn inference() -> Self {
        let t = Self::new();
        t.grad_enabled.set(false);
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` with recording switched off, restoring the previous mode.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.grad_enabled.replace(false);
        let out = f();
        self.grad_enabled.set(prev);
        out
    }

    /// A trainable leaf. Recorded only when gradients are enabled.
    pub fn param(&self, value: Tensor) -> Var {
        let node = if self.grad_enabled.get() {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            value: Rc::new(value),
            node,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let tracked = self.grad_enabled.get() && inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Ok(Var {
            value: Rc::new(value),
            node,
        })
    }

    /// Sweeps the tape backwards from a scalar loss.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::NotScalar(loss.value.shape().to_vec()));
        }
        let Some(root) = loss.node else {
            return Ok(Gradients::default());
        };
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Tensor>> = Vec::with_capacity(root + 1);
        pending.resize_with(root + 1, || None);
        pending[root] = Some(Tensor::full(loss.value.shape().to_vec(), 1.0));
        let mut leaves = HashMap::new();

        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                leaves.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&grad, &needs);
            for (slot, g) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(g)) = (slot, g) else {
                    continue;
                };
                match &mut pending[*input] {
                    Some(acc) => acc.add_assign(&g),
                    empty => *empty = Some(g),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when it was unreachable from the loss.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|id| self.leaves.get(&id))
    }

    /// Gradient of `var`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}
