//! Reverse-mode automatic differentiation over coarse tensor ops.
//!
//! A [`Tape`] records every op applied during a forward pass. Calling
//! [`Tape::backward`] replays the tape in reverse and accumulates gradients
//! additively into every node that requires them. Learned parameters are
//! borrowed from a [`ParamStore`] rather than copied onto the tape.

mod adam;
pub mod gradcheck;
mod ops;
mod params;
mod recurrent;

use alloc::vec;
use alloc::vec::Vec;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{ElementwiseMode, MaskedLoss, PoolMode, UnaryMode, BCE_EPS};
pub use recurrent::LstmWeights;
pub use params::{fan_in_uniform, ParamGrads, ParamId, ParamStore};

use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: ops::Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store attached.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Value::Owned(value), ops::Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Value::Owned(value), ops::Op::Leaf, false)
    }

    /// A learned parameter borrowed from the attached store.
    ///
    /// # Panics
    /// If the tape has no store or the id does not belong to it.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("tape has no parameter store attached");
        assert!(id.index() < store.len(), "unknown parameter id");
        self.push_node(Value::Param(id), ops::Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("parameter node without a store")
                .get(*id),
        }
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn data(&self, var: Var) -> &[f64] {
        self.value(var).data()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: ops::Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Value::Owned(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Value, op: ops::Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = vec![1.0; self.value(root).len()];
        self.backward_with(root, seed)
    }

    /// Backpropagates from `root` with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.value(root).len(), "seed gradient length");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        let mut kept: Vec<Option<Vec<f64>>> = Vec::new();
        kept.resize_with(root.0 + 1, || None);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, ops::Op::Leaf) {
                kept[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Gradients { grads: kept }
    }

    fn param_nodes(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.value {
            Value::Param(id) => Some((Var(i), id)),
            Value::Owned(_) => None,
        })
    }
}

/// Gradients of the backward root with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when it did not influence the root.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds `scale * grad` of every parameter leaf on `tape` into `out`.
    ///
    /// A parameter placed on the tape several times receives the sum.
    pub fn accumulate_params(&self, tape: &Tape<'_>, out: &mut ParamGrads, scale: f64) {
        for (var, id) in tape.param_nodes() {
            if let Some(g) = self.get(var) {
                let dst = out.get_mut(id);
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_accumulates_over_reused_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.elementwise(x, x, ElementwiseMode::Add).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.elementwise(x, c, ElementwiseMode::Mul).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn parameter_grads_are_summed_per_store_entry() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![2.0]));
        let mut tape = Tape::with_params(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        let p = tape.elementwise(a, b, ElementwiseMode::Mul).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s);
        let mut acc = ParamGrads::zeros_like(&store);
        g.accumulate_params(&tape, &mut acc, 1.0);
        // d(w*w)/dw = 2w = 4
        assert_eq!(acc.get(w), &[4.0]);
    }
}
