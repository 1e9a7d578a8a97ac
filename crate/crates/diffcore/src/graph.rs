//! Tape of recorded operations and the reverse pass over it.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::ops::{self, Op};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    param: Option<ParamId>,
    aux: Vec<usize>,
}

/// A single forward computation. Nodes are appended in evaluation order, so the
/// reverse pass is a walk from the loss back to index zero.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: HashMap<ParamId, NodeId>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that treats parameters as constants (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
            param,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false, None)
    }

    /// Leaf bound to a stored parameter; backward adds into its gradient slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let node = self.push_leaf(store.value(id).clone(), self.grad_enabled, Some(id));
        self.param_nodes.insert(id, node);
        node
    }

    /// New constant leaf holding the current value of `x`; no gradient flows back through it.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Gradient of the last backward's loss with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply_shaped(op, inputs, None)
    }

    fn apply_shaped(&mut self, op: Op, inputs: &[NodeId], target: Option<&[usize]>) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let fwd = ops::forward(&op, &vals, target)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: fwd.value,
            op: Some(op),
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            requires_grad,
            param: None,
            aux: if requires_grad { fwd.aux } else { Vec::new() },
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { transpose_rhs: false }, &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Op::Scale(s), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    /// `c - a` for a constant scalar `c`.
    pub fn rsub_scalar(&mut self, c: f64, a: NodeId) -> Result<NodeId> {
        let full = self.constant(Tensor::full(self.shape(a), c));
        self.sub(full, a)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::RowSoftmax, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean(None), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(None), &[a])
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Mean(Some(axis)), &[a])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Sum(Some(axis)), &[a])
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatLast, parts)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.apply(Op::Conv2d, &[x, kernel])
    }

    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MaxPool2d, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply_shaped(Op::Reshape, &[x], Some(shape))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[x])
    }

    /// Stacks equal-length vectors (or `[1, d]` rows) into an `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = rows.first().ok_or_else(|| DiffError::contract("stack_rows of nothing"))?;
        let d = self.value(*first).numel();
        let flat: Vec<NodeId> = rows
            .iter()
            .map(|&r| {
                if self.shape(r).len() == 1 {
                    Ok(r)
                } else {
                    let n = self.value(r).numel();
                    self.reshape(r, &[n])
                }
            })
            .collect::<Result<_>>()?;
        let cat = self.concat_last(&flat)?;
        self.reshape(cat, &[rows.len(), d])
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into
    /// `store`, so two calls without zeroing double them.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(DiffError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if let Some(pid) = node.param {
                store.get_mut(pid).tensor.accumulate_grad(&g);
            }
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|n| &self.nodes[n.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|n| self.nodes[n.0].requires_grad).collect();
                let local = ops::backward(op, &inputs, &node.value, &node.aux, &g, &needs);
                for (inp, lg) in node.inputs.iter().zip(local) {
                    if let Some(lg) = lg {
                        match &mut grads[inp.0] {
                            Some(acc) => acc.iter_mut().zip(&lg).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(lg),
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}
