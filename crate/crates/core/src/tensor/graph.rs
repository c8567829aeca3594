use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{primitive_forward, vjp, Op};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<S> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Arc<Tensor<S>>,
    requires_grad: bool,
    param: bool,
}

/// Append-only computation tape. Nodes can only reference earlier nodes, so
/// insertion order is a topological order.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    by_node: HashMap<NodeId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.by_node.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.by_node.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Arc<Tensor<S>>, param: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: param,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, value: impl Into<Arc<Tensor<S>>>) -> NodeId {
        self.leaf(value.into(), true)
    }

    /// Frozen leaf: no gradient is computed for it or for anything that
    /// depends only on constants.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor<S>>>) -> NodeId {
        self.leaf(value.into(), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param
    }

    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, _)| NodeId(i))
    }

    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::contract(op.name(), format!("unknown input node {}", bad.0)));
        }
        let value = {
            let vals: Vec<&Tensor<S>> = inputs.iter().map(|id| &*self.nodes[id.0].value).collect();
            primitive_forward(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value: Arc::new(value),
            requires_grad,
            param: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Op::Scale(k), &[a])
    }
    /// `a - b`, expressed with `scale` and `add`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::RowSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LayerNorm, &[a])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn lookup(&mut self, table: NodeId, ix: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::EmbeddingLookup(ix), &[table])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatRows, parts)
    }
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatCols, parts)
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::SliceCols { start, len }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::CosineSimilarity, &[a, b])
    }
    pub fn scatter_rows(&mut self, base: NodeId, rows: NodeId, pos: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::ScatterRows(pos), &[base, rows])
    }

    /// Reverse pass from a single-element `loss`. Every parameter leaf gets
    /// an entry; parameters with no path to the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("backward", format!("loss node {} not in graph", loss.0)))?;
        if !root.value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let vals: Vec<&Tensor<S>> = node.inputs.iter().map(|id| &*self.nodes[id.0].value).collect();
            let parts = vjp(&node.op, &vals, &node.value, &g, &need);
            for ((input, part), needed) in node.inputs.iter().zip(parts).zip(need) {
                let (Some(part), true) = (part, needed) else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(part),
                }
            }
        }
        let by_node = self
            .params()
            .map(|id| {
                let g = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { by_node })
    }

    /// Replaces a leaf's value and re-evaluates every later node.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor<S>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) || node.value.shape() != value.shape() {
            return Err(Error::contract("set_leaf", "target must be a leaf of the same shape"));
        }
        node.value = Arc::new(value);
        for idx in id.0 + 1..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let out = {
                let node = &self.nodes[idx];
                let vals: Vec<&Tensor<S>> = node.inputs.iter().map(|i| &*self.nodes[i.0].value).collect();
                primitive_forward(&node.op, &vals)?
            };
            self.nodes[idx].value = Arc::new(out);
        }
        Ok(())
    }
}

/// Compares the analytic gradient of `loss` w.r.t. `param` with central
/// differences of the given `step`. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|)` over the parameter's entries.
///
/// The graph is restored to its original values before returning.
pub fn grad_check<S: Scalar>(graph: &mut Graph<S>, loss: NodeId, param: NodeId, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::contract("grad_check", format!("step must be positive, got {step}")));
    }
    if !graph.is_param(param) {
        return Err(Error::contract("grad_check", "target node is not a parameter"));
    }
    let analytic = graph
        .backward(loss)?
        .take(param)
        .expect("backward reports every parameter");
    let original = graph.value(param).clone();
    let mut worst = 0.0f64;
    for k in 0..original.numel() {
        let mut probe = |delta: f64| -> Result<f64> {
            let mut t = original.clone();
            t.data_mut()[k] += S::of(delta);
            graph.set_leaf(param, t)?;
            Ok(graph.value(loss).item()?.as_f64())
        };
        let plus = probe(step)?;
        let minus = probe(-step)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[k].as_f64();
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    graph.set_leaf(param, original)?;
    Ok(worst)
}
