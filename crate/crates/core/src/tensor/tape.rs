use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// A fused op with a hand-written reverse pass.
///
/// `backward` receives the upstream gradient plus the values of the op's
/// inputs, and returns one optional gradient per input (same order, same
/// length as the corresponding input).
pub trait CustomOp<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(&self, grad_out: &[T], inputs: &[&Tensor<T>], needs_grad: &[bool]) -> Vec<Option<Vec<T>>>;
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    MatMul(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d { x: Var, w: Var },
    Reshape(Var),
    PermuteSeq { x: Var, perm: Vec<usize> },
    GatherRows { table: Var, idx: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Mse { pred: Var, target: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Exp(a) | Softplus(a) | Silu(a) | Sigmoid(a) | Sum(a) | Mean(a) | Reshape(a) => {
                vec![*a]
            }
            MeanAxis { x, .. } | PermuteSeq { x, .. } | Narrow { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv1d { x, w } => vec![*x, *w],
            GatherRows { table, .. } => vec![*table],
            Mse { pred, target } => vec![*pred, *target],
            CrossEntropy { logits, .. } => vec![*logits],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<T: Element> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<T>>,
}

/// Topologically ordered record of a forward computation.
///
/// Nodes are appended in execution order, so a reverse sweep over the
/// node list visits every node after all of its consumers.
pub struct Tape<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of a fused op.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let inputs = node.op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = super::ops::backward_op(self, i, &g, &needs);
            for ((v, ig), need) in inputs.iter().zip(input_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.len(), self.nodes[v.0].value.numel());
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(ig),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}
