//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append nodes to a [`Tape`]; every node's parents precede it, so
//! replaying the tape backwards visits nodes in reverse topological order.
//! [`Tape::backward`] consumes the tape and returns the gradients of every
//! trainable leaf reachable from the loss.

mod attention;
mod broadcast;
mod elementwise;
mod gemm;
mod image;
mod linalg;
mod conv;
mod nn;
mod reduce;
mod shape;

pub use attention::{BlockLinear, BlockOutput, BlockWeights, LinearFn, LN_EPS};
pub use image::SpatialMap;
pub use nn::BatchStats;
#[allow(unused_imports)]
pub(crate) use gemm::{gemm_nn, gemm_nt, gemm_tn};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Data handed to a node's backward rule.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f32],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Ordered record of operations. Single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Records an operation. The output is checked for NaN/Inf; the backward
    /// rule is dropped when no parent needs a gradient.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Operation names in recording order.
    pub fn ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op)
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Some(rule) => {
                    let ctx = BackwardCtx {
                        grad: &g,
                        inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                        output: &node.value,
                        needs: node
                            .parents
                            .iter()
                            .map(|&p| self.nodes[p].requires_grad)
                            .collect(),
                    };
                    let input_grads = rule(&ctx);
                    debug_assert_eq!(input_grads.len(), node.parents.len());
                    for (&p, ig) in node.parents.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), self.nodes[p].value.numel(), "{}", node.op);
                        match &mut grads[p] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of trainable leaves, indexed by their [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub mod gradcheck;
