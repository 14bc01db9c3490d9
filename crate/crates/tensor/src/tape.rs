use std::collections::BTreeMap;

use crate::ops::{self, attention::AttentionSpec};
use crate::{ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: S },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<S>, rstd: Vec<S> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<S> },
    GatherRows { sources: Vec<Var>, index: Vec<(u32, u32)> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<S>, count: usize },
    Sum { x: Var },
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<S>,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so the tape is always a
/// topological order of the graph and backward is a single reverse sweep.
pub struct Tape<S: Scalar = f32> {
    pub(crate) nodes: Vec<Node<S>>,
    leaves: BTreeMap<String, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Anonymous leaf.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Register a named parameter. Registering the same name again returns
    /// the existing node, so a parameter shared by several layers or batch
    /// items accumulates a single gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<S>, requires_grad: bool) -> Var {
        if let Some(&v) = self.leaves.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.leaves.insert(name.to_string(), v);
        v
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("output must be a scalar, got shape {:?}", out.shape()),
            ));
        }
        if !out.is_finite() {
            return Err(TensorError::NonFinite("backward seed".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![S::one()]);
        let mut visited = 0usize;
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            ops::backward(self, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        debug_assert!(visited <= self.nodes.len());
        Ok(Gradients { grads })
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a node, shaped like its value. `None` when the node does
    /// not require grad or the output does not depend on it.
    pub fn get(&self, tape: &Tape<S>, v: Var) -> Option<Tensor<S>> {
        if !tape.requires_grad(v) {
            return None;
        }
        let shape = tape.shape(v).to_vec();
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape matches value"))
    }

    /// Gradients of every named leaf that requires grad. Leaves the output
    /// does not depend on get an explicit zero gradient.
    pub fn named(&self, tape: &Tape<S>) -> ParamStore<S> {
        tape.leaf_names()
            .filter(|(_, v)| tape.requires_grad(*v))
            .map(|(name, v)| {
                let g = self
                    .get(tape, v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Fetch (allocating if needed) the gradient buffer of `v`, or `None` if
/// `v` does not take gradients.
pub(crate) fn grad_slot<'g, S: Scalar>(
    tape: &Tape<S>,
    grads: &'g mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'g mut Vec<S>> {
    let node = &tape.nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.numel()]))
}
