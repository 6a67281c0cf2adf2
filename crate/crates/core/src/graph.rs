//! Append-only computation graph with lazy, incremental evaluation.
//!
//! Building a node records its operation, inputs, shape, depth and
//! signature; nothing is computed until [`Graph::forward`] is called. Each
//! forward call schedules and runs only the nodes appended since the
//! previous call. Since inputs must already exist when a node is added, an
//! evaluated node can never gain a new input edge.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{self, Counters, ExecOptions, ExecState, Slot};
use crate::kernels::ElemOp;
use crate::params::{ParamId, ParameterStore};
use crate::scheduler::{self, BatchMode, ExecutionPlan};
use crate::signature::{self, Signature};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    InputConst,
    Parameter(ParamId),
    /// Row `index` of a parameter embedding table.
    Lookup { index: usize },
    MatMul,
    /// `A·x + y`, operands in that order.
    Affine,
    Elementwise(ElemOp),
    BroadcastAddCol,
    ConcatCols,
    ConcatRows,
    /// Elements `start..end` of a vector, or columns `start..end` of a matrix.
    Slice { start: usize, end: usize },
    SqEuclidean,
    MaskedLoss,
    SumLosses,
    PickElement { index: usize },
    /// `-log softmax(x)[label]` of a vector of scores.
    PickNegLogSoftmax { label: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::InputConst => "input_const",
            OpKind::Parameter(_) => "parameter",
            OpKind::Lookup { .. } => "lookup",
            OpKind::MatMul => "matmul",
            OpKind::Affine => "affine",
            OpKind::Elementwise(e) => e.name(),
            OpKind::BroadcastAddCol => "broadcast_add_col",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Slice { .. } => "slice",
            OpKind::SqEuclidean => "sq_euclidean",
            OpKind::MaskedLoss => "masked_loss",
            OpKind::SumLosses => "sum_losses",
            OpKind::PickElement { .. } => "pick_element",
            OpKind::PickNegLogSoftmax { .. } => "pick_neg_log_softmax",
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, OpKind::InputConst | OpKind::Parameter(_))
    }

    /// Whether gradients flow into operand `pos`.
    pub fn differentiable(&self, pos: usize) -> bool {
        !matches!((self, pos), (OpKind::MaskedLoss, 1))
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    inputs: (u32, u32),
    pub shape: Shape,
    pub depth: u32,
    pub signature: Signature,
    pub requires_grad: bool,
}

/// Node table of a graph: structure only, no values. Input lists of all
/// nodes share one contiguous edge buffer.
#[derive(Debug, Clone, Default)]
pub struct Dag {
    nodes: Vec<Node>,
    edges: Vec<NodeId>,
}

impl Dag {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        let (start, len) = self.nodes[id.0].inputs;
        &self.edges[start as usize..(start + len) as usize]
    }

    pub fn is_parameter(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, OpKind::Parameter(_))
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    fn push(&mut self, op: OpKind, inputs: &[NodeId], shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        let depth = inputs.iter().map(|&i| self.nodes[i.0].depth + 1).max().unwrap_or(0);
        let requires_grad = match op {
            OpKind::Parameter(_) => true,
            _ => inputs
                .iter()
                .enumerate()
                .any(|(pos, &i)| op.differentiable(pos) && self.nodes[i.0].requires_grad),
        };
        let signature = signature::compute(self, &op, inputs, id);
        let start = self.edges.len() as u32;
        self.edges.extend_from_slice(inputs);
        self.nodes.push(Node { op, inputs: (start, inputs.len() as u32), shape, depth, signature, requires_grad });
        id
    }

    /// Tab-separated dump, one node per line:
    /// `id  opcode  shape  input_ids  signature_hex  depth`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for id in self.ids() {
            let n = self.node(id);
            let inputs = self.inputs(id);
            let inputs = if inputs.is_empty() {
                "-".to_string()
            } else {
                inputs.iter().map(|i| i.0.to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{:x}\t{}", id.0, n.op.name(), n.shape, inputs, n.signature, n.depth);
        }
        out
    }

    fn infer_shape(&self, op: &OpKind, inputs: &[NodeId]) -> Result<Shape> {
        let name = op.name();
        let shapes: Vec<Shape> = inputs.iter().map(|&i| self.node(i).shape).collect();
        let arity = |expected: usize| {
            if shapes.len() == expected {
                Ok(())
            } else {
                Err(Error::Arity { op: name, expected: expected.to_string(), got: shapes.len() })
            }
        };
        let at_least_one = || {
            if shapes.is_empty() {
                Err(Error::EmptyInput { op: name })
            } else {
                Ok(())
            }
        };
        let product = |a: Shape, b: Shape| {
            if a.rank() != 2 || a.cols() != b.rows() {
                Err(Error::dims(name, a, b))
            } else if b.is_vector() {
                Ok(Shape::vector(a.rows()))
            } else {
                Ok(Shape::matrix(a.rows(), b.cols()))
            }
        };
        match *op {
            OpKind::InputConst | OpKind::Parameter(_) => {
                Err(Error::Contract(format!("{name} nodes are created with Graph::input / Graph::parameter")))
            }
            OpKind::Lookup { index } => {
                arity(1)?;
                let table = shapes[0];
                if !self.is_parameter(inputs[0]) || table.rank() != 2 {
                    return Err(Error::InvalidShape {
                        op: name,
                        shape: table,
                        reason: "lookup table must be a rank-2 parameter".into(),
                    });
                }
                if index >= table.rows() {
                    return Err(Error::IndexOutOfRange { what: "lookup table", index, size: table.rows() });
                }
                Ok(Shape::vector(table.cols()))
            }
            OpKind::MatMul => {
                arity(2)?;
                product(shapes[0], shapes[1])
            }
            OpKind::Affine => {
                arity(3)?;
                let ax = product(shapes[0], shapes[1])?;
                if shapes[2] != ax {
                    return Err(Error::dims(name, ax, shapes[2]));
                }
                Ok(ax)
            }
            OpKind::Elementwise(e) => {
                arity(e.arity())?;
                if e.arity() == 2 && shapes[0] != shapes[1] {
                    return Err(Error::dims(name, shapes[0], shapes[1]));
                }
                Ok(shapes[0])
            }
            OpKind::BroadcastAddCol => {
                arity(2)?;
                if !shapes[1].is_vector() || shapes[1].rows() != shapes[0].rows() {
                    return Err(Error::dims(name, shapes[0], shapes[1]));
                }
                Ok(shapes[0])
            }
            OpKind::ConcatCols => {
                at_least_one()?;
                let rows = shapes[0].rows();
                if let Some(bad) = shapes.iter().find(|s| s.rows() != rows) {
                    return Err(Error::dims(name, shapes[0], *bad));
                }
                Ok(Shape::matrix(rows, shapes.iter().map(|s| s.cols()).sum()))
            }
            OpKind::ConcatRows => {
                at_least_one()?;
                let first = shapes[0];
                if let Some(bad) = shapes.iter().find(|s| s.rank() != first.rank() || s.cols() != first.cols()) {
                    return Err(Error::dims(name, first, *bad));
                }
                let rows = shapes.iter().map(|s| s.rows()).sum();
                Ok(if first.is_vector() { Shape::vector(rows) } else { Shape::matrix(rows, first.cols()) })
            }
            OpKind::Slice { start, end } => {
                arity(1)?;
                let s = shapes[0];
                let extent = if s.is_vector() { s.rows() } else { s.cols() };
                if start >= end || end > extent {
                    return Err(Error::InvalidShape {
                        op: name,
                        shape: s,
                        reason: format!("range {start}:{end} outside 0:{extent}"),
                    });
                }
                Ok(if s.is_vector() { Shape::vector(end - start) } else { Shape::matrix(s.rows(), end - start) })
            }
            OpKind::SqEuclidean => {
                arity(2)?;
                if shapes[0] != shapes[1] {
                    return Err(Error::dims(name, shapes[0], shapes[1]));
                }
                Ok(Shape::scalar())
            }
            OpKind::MaskedLoss => {
                arity(2)?;
                if !shapes[1].is_vector() || shapes[1].rows() != shapes[0].cols() {
                    return Err(Error::dims(name, shapes[0], shapes[1]));
                }
                Ok(Shape::scalar())
            }
            OpKind::SumLosses => {
                at_least_one()?;
                if let Some(bad) = shapes.iter().find(|s| !s.is_scalar()) {
                    return Err(Error::InvalidShape { op: name, shape: *bad, reason: "losses must be scalars".into() });
                }
                Ok(Shape::scalar())
            }
            OpKind::PickElement { index } => {
                arity(1)?;
                if index >= shapes[0].numel() {
                    return Err(Error::IndexOutOfRange { what: "pick_element input", index, size: shapes[0].numel() });
                }
                Ok(Shape::scalar())
            }
            OpKind::PickNegLogSoftmax { label } => {
                arity(1)?;
                if !shapes[0].is_vector() {
                    return Err(Error::InvalidShape { op: name, shape: shapes[0], reason: "scores must be a vector".into() });
                }
                if label >= shapes[0].rows() {
                    return Err(Error::IndexOutOfRange { what: "label set", index: label, size: shapes[0].rows() });
                }
                Ok(Shape::scalar())
            }
        }
    }
}

/// Wall-clock time the engine spent in each phase, summed over calls.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub schedule: Duration,
    pub forward: Duration,
    pub backward_prep: Duration,
    pub backward: Duration,
}

pub struct Graph<T: Real = f64> {
    dag: Dag,
    param_nodes: HashMap<ParamId, NodeId>,
    watermark: usize,
    plans: Vec<ExecutionPlan>,
    exec: ExecState<T>,
    times: PhaseTimes,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_options(ExecOptions::default())
    }

    pub fn with_options(options: ExecOptions) -> Self {
        Graph {
            dag: Dag::default(),
            param_nodes: HashMap::new(),
            watermark: 0,
            plans: Vec::new(),
            exec: ExecState::new(options),
            times: PhaseTimes::default(),
        }
    }

    /// Empties the graph for the next batch. Buffers keep their capacity,
    /// so a training loop that reuses one graph avoids reallocating them.
    pub fn clear(&mut self) {
        self.dag.nodes.clear();
        self.dag.edges.clear();
        self.param_nodes.clear();
        self.watermark = 0;
        self.plans.clear();
        self.exec.reset();
        self.times = PhaseTimes::default();
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn node_count(&self) -> usize {
        self.dag.len()
    }

    /// Number of leading nodes already evaluated.
    pub fn watermark(&self) -> usize {
        self.watermark
    }

    /// Plans executed so far, one per forward call that had new nodes.
    pub fn plans(&self) -> &[ExecutionPlan] {
        &self.plans
    }

    pub fn counters(&self) -> &Counters {
        &self.exec.counters
    }

    pub fn phase_times(&self) -> PhaseTimes {
        self.times
    }

    pub fn dump(&self) -> String {
        self.dag.dump()
    }

    /// Constant input. Its data is stored immediately; it never runs as a kernel.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.dag.push(OpKind::InputConst, &[], value.shape());
        self.exec.store_constant(value.data());
        id
    }

    /// The node standing for a stored parameter. Each parameter maps to a
    /// single node per graph, so every use shares that node's id.
    pub fn parameter(&mut self, store: &ParameterStore<T>, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(node);
        }
        let shape = store.slot(id)?.value.shape();
        let node = self.dag.push(OpKind::Parameter(id), &[], shape);
        self.exec.slots.push(Slot::Param(id));
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    pub fn add_node(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|i| i.0 >= self.dag.len()) {
            return Err(Error::UnknownNode(bad));
        }
        let shape = self.dag.infer_shape(&op, inputs)?;
        let id = self.dag.push(op, inputs, shape);
        self.exec.slots.push(Slot::Pending);
        Ok(id)
    }

    /// Evaluates every node not yet evaluated and returns the values of `targets`.
    pub fn forward(
        &mut self,
        store: &ParameterStore<T>,
        targets: &[NodeId],
        mode: BatchMode,
    ) -> Result<HashMap<NodeId, Tensor<T>>> {
        if let Some(&bad) = targets.iter().find(|i| i.0 >= self.dag.len()) {
            return Err(Error::UnknownNode(bad));
        }
        let pending = self.watermark..self.dag.len();
        if !pending.is_empty() {
            let start = Instant::now();
            let plan = scheduler::schedule(&self.dag, pending, mode)?;
            self.times.schedule += start.elapsed();

            let start = Instant::now();
            executor::execute_forward(&self.dag, &mut self.exec, store, &plan)?;
            self.times.forward += start.elapsed();
            self.plans.push(plan);
            self.watermark = self.dag.len();
        }
        targets.iter().map(|&t| Ok((t, self.value(store, t)?))).collect()
    }

    /// Reverse pass from a scalar `loss`; adds ∂loss/∂θ into the store's gradients.
    pub fn backward(&mut self, store: &mut ParameterStore<T>, loss: NodeId) -> Result<()> {
        let node = self.dag.get(loss).ok_or(Error::UnknownNode(loss))?;
        if !node.shape.is_scalar() {
            return Err(Error::Contract(format!("loss {loss:?} has shape {}, expected a scalar", node.shape)));
        }
        if loss.0 >= self.watermark {
            return Err(Error::Contract(format!("backward from {loss:?} before forward evaluated it")));
        }
        executor::execute_backward(&self.dag, &mut self.exec, store, &self.plans, loss, &mut self.times)
    }

    pub fn value(&self, store: &ParameterStore<T>, id: NodeId) -> Result<Tensor<T>> {
        let node = self.dag.get(id).ok_or(Error::UnknownNode(id))?;
        match self.exec.slots[id.0] {
            Slot::Param(p) => Ok(store.slot(p)?.value.clone()),
            Slot::Arena(off) => Tensor::new(node.shape, self.exec.values[off..off + node.shape.numel()].to_vec()),
            Slot::Pending => Err(Error::Contract(format!("{id:?} has not been evaluated"))),
        }
    }

    /// Gradient of the last backward pass with respect to a non-parameter node.
    pub fn node_gradient(&self, id: NodeId) -> Option<Tensor<T>> {
        let node = self.dag.get(id)?;
        match self.exec.slots[id.0] {
            Slot::Arena(off) if self.exec.grads.len() >= off + node.shape.numel() => {
                Tensor::new(node.shape, self.exec.grads[off..off + node.shape.numel()].to_vec()).ok()
            }
            _ => None,
        }
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Elementwise(ElemOp::Tanh), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Elementwise(ElemOp::Sigmoid), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Elementwise(ElemOp::Log), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Elementwise(ElemOp::Square), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Elementwise(ElemOp::Add), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Elementwise(ElemOp::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Elementwise(ElemOp::Mul), &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::MatMul, &[a, b])
    }

    pub fn affine(&mut self, a: NodeId, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Affine, &[a, x, y])
    }

    pub fn broadcast_add_col(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::BroadcastAddCol, &[m, v])
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.add_node(OpKind::ConcatCols, xs)
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.add_node(OpKind::ConcatRows, xs)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.add_node(OpKind::Slice { start, end }, &[x])
    }

    pub fn sq_euclidean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::SqEuclidean, &[a, b])
    }

    pub fn masked_loss(&mut self, d: NodeId, mask: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::MaskedLoss, &[d, mask])
    }

    pub fn sum_losses(&mut self, losses: &[NodeId]) -> Result<NodeId> {
        self.add_node(OpKind::SumLosses, losses)
    }

    pub fn pick_element(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.add_node(OpKind::PickElement { index }, &[x])
    }

    pub fn pick_neg_log_softmax(&mut self, scores: NodeId, label: usize) -> Result<NodeId> {
        self.add_node(OpKind::PickNegLogSoftmax { label }, &[scores])
    }

    pub fn lookup(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        self.add_node(OpKind::Lookup { index }, &[table])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_graph_is_empty_and_independent() {
        let mut a = Graph::<f64>::new();
        let b = Graph::<f64>::new();
        assert_eq!(a.node_count(), 0);
        a.input(Tensor::scalar(1.0));
        assert_eq!(a.node_count(), 1);
        assert_eq!(b.node_count(), 0);
    }

    #[test]
    fn forward_on_empty_graph_is_noop() {
        let mut g = Graph::<f64>::new();
        let out = g.forward(&ParameterStore::new(), &[], BatchMode::Agenda).unwrap();
        assert!(out.is_empty());
        assert_eq!(g.counters().kernel_invocations, 0);
        assert!(g.plans().is_empty());
    }

    #[test]
    fn depth_rule() {
        let mut g = Graph::<f64>::new();
        let leaf = g.input(Tensor::vector(vec![0.5, -0.5]));
        assert_eq!(g.dag().node(leaf).depth, 0);
        let mut last = leaf;
        for i in 1..=10 {
            last = g.tanh(last).unwrap();
            assert_eq!(g.dag().node(last).depth, i);
        }
        let other = g.input(Tensor::vector(vec![1.0, 1.0]));
        let joined = g.add(last, other).unwrap();
        assert_eq!(g.dag().node(joined).depth, 11);
    }

    #[test]
    fn construction_errors() {
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        let w = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.tanh(NodeId(99)), Err(Error::UnknownNode(NodeId(99)))));
        assert!(matches!(g.add(v, w), Err(Error::Dimension { op: "add", .. })));
        assert!(matches!(g.add_node(OpKind::MatMul, &[v]), Err(Error::Arity { .. })));
        assert!(matches!(g.sum_losses(&[]), Err(Error::EmptyInput { .. })));
        assert!(g.sum_losses(&[v]).is_err());
        assert!(g.slice(v, 1, 1).is_err());
        assert!(g.lookup(v, 0).is_err());
        assert!(g.add_node(OpKind::InputConst, &[]).is_err());
        // Failed constructions leave no trace.
        assert_eq!(g.node_count(), 2);
    }

    #[test]
    fn parameters_are_deduplicated() {
        let mut store = ParameterStore::<f64>::new();
        let p = store.add_zeros("w", Shape::matrix(2, 2));
        let mut g = Graph::new();
        let a = g.parameter(&store, p).unwrap();
        let b = g.parameter(&store, p).unwrap();
        assert_eq!(a, b);
        assert!(g.dag().node(a).requires_grad);
    }

    #[test]
    fn dump_format() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![1.0, 2.0]));
        let s = g.add(a, b).unwrap();
        let dump = g.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("0\tinput_const\t2\t-\t"));
        let fields: Vec<&str> = lines[2].split('\t').collect();
        assert_eq!(fields[..4], ["2", "add", "2", "0,1"]);
        assert_eq!(fields[4], format!("{:016x}", g.dag().node(s).signature.hash));
        assert_eq!(fields[5], "1");
    }

    #[test]
    fn backward_contracts() {
        let mut store = ParameterStore::<f64>::new();
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        let l = g.sq_euclidean(v, v).unwrap();
        assert!(matches!(g.backward(&mut store, l), Err(Error::Contract(_))));
        g.forward(&store, &[l], BatchMode::None).unwrap();
        assert!(matches!(g.backward(&mut store, v), Err(Error::Contract(_))));
        g.backward(&mut store, l).unwrap();
    }
}
