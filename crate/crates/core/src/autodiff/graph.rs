//! Tape of tensor operations and reverse-mode gradient propagation.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// What an op's backward pass sees.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad_out: &'a [T],
    /// Whether each input wants a gradient; entries that are `false` may be
    /// answered with `None`.
    pub needs: &'a [bool],
}

/// Local derivative of a recorded op. Returns one gradient per input, each
/// with the input's element count.
pub trait BackwardOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn BackwardOp<T>>>,
}

/// A single forward computation. Nodes are appended in execution order, so
/// the tape is already topologically sorted.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, inputs: vec![], op: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records the result of an op. The node needs a gradient iff any input does.
    pub fn push_op(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn BackwardOp<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, inputs: inputs.to_vec(), op: Some(op) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or an error when no backward pass reached it.
    pub fn grad_of(&self, v: Var) -> Result<&[T]> {
        self.grad(v).ok_or_else(|| Error::NoGradient(format!("node {} has no gradient; run backward first", v.0)))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.nodes[loss.0].value.dims()
            )));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Backpropagates a caller-supplied output gradient. Leaf gradients
    /// accumulate across calls; intermediate gradients are recomputed.
    pub fn backward_with(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(Error::LengthMismatch { expected: self.nodes[root.0].value.len(), found: seed.len() });
        }
        for n in &mut self.nodes {
            if n.op.is_some() {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[root.0].grad, seed);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let (Some(op), Some(grad_out)) = (node.op.as_ref(), node.grad.as_ref()) else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let input_ids = node.inputs.clone();
            let needs: Vec<bool> = input_ids.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = input_ids.iter().map(|v| &self.nodes[v.0].value).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad_out, needs: &needs };
            let grads = op.backward(&ctx);
            debug_assert_eq!(grads.len(), input_ids.len(), "{} returned wrong gradient count", op.name());
            for ((v, g), need) in input_ids.into_iter().zip(grads).zip(needs) {
                if let (Some(g), true) = (g, need) {
                    debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
                    accumulate(&mut self.nodes[v.0].grad, g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}
