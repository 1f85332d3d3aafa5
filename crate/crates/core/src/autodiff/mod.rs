// SPDX-License-Identifier: Apache-2.0

//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! appended after their parents, so the tape order is a valid topological
//! order and [`Tape::backward`] is a single reverse sweep that visits each
//! node once. Leaf gradients accumulate across calls until
//! [`Tape::zero_grad`].
//!
//! ```
//! use credal::autodiff::Tape;
//! use credal::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = x.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;

pub use check::{finite_difference_check, relative_error};
use ops::Op;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations in forward order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Propagates `d loss / d node` back to every leaf that requires a
    /// gradient, adding into the leaf's gradient slot.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = {
            let nodes = self.nodes.borrow();
            let n = &nodes[loss.id];
            if n.value.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    n.value.shape()
                )));
            }
            let mut adj = vec![None; loss.id + 1];
            if n.requires_grad {
                adj[loss.id] = Some(vec![1.0]);
            }
            adj
        };

        let nodes = self.nodes.borrow();
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            ops::backward_node(&nodes, id, &g, &mut adjoints);
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, x) in acc.data_mut().iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                None => {
                    let shape = node.value.shape().to_vec();
                    node.grad = Some(Tensor::new(shape, g).expect("adjoint matches value shape"));
                }
            }
        }
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
