//! Batching-compatibility signatures.
//!
//! Two nodes with equal signatures can run as one batched kernel once their
//! inputs are ready. The key is built once, fed either to a hasher (the
//! 64-bit value the scheduler uses) or to a text writer producing the
//! readable form, e.g. `slice-400x500-100:200` or `matmul-node123-400`.

use std::collections::hash_map::DefaultHasher;
use std::fmt::{self, Write as _};
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::graph::{Dag, NodeId, OpKind};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SigClass {
    Componentwise,
    DimensionSensitive,
    SharedElement,
    Unbatchable,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub hash: u64,
    pub class: SigClass,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}/{:?}", self.hash, self.class)
    }
}

impl fmt::LowerHex for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.hash)
    }
}

/// Relative kernel cost, used to break average-depth ties in the agenda.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CostClass {
    Cheap,
    Heavy,
}

pub fn cost_class(op: &OpKind) -> CostClass {
    match op {
        OpKind::MatMul | OpKind::Affine | OpKind::Lookup { .. } => CostClass::Heavy,
        _ => CostClass::Cheap,
    }
}

/// Operand positions that may hold a parameter shared across a batch:
/// the left factor of a product, and `A` and `y` in `A·x + y`.
pub fn shared_positions(op: &OpKind) -> &'static [usize] {
    match op {
        OpKind::MatMul => &[0],
        OpKind::Affine => &[0, 2],
        _ => &[],
    }
}

trait KeySink {
    fn op(&mut self, name: &str);
    fn node(&mut self, id: NodeId);
    fn shape(&mut self, shape: Shape);
    fn range(&mut self, start: usize, end: usize);
}

struct HashSink(DefaultHasher);

impl KeySink for HashSink {
    fn op(&mut self, name: &str) {
        self.0.write_u8(0);
        self.0.write(name.as_bytes());
        self.0.write_u8(0xff);
    }
    fn node(&mut self, id: NodeId) {
        self.0.write_u8(1);
        self.0.write_u64(id.0 as u64);
    }
    fn shape(&mut self, shape: Shape) {
        self.0.write_u8(2);
        self.0.write_u8(shape.rank() as u8);
        for &d in shape.dims() {
            self.0.write_u64(d as u64);
        }
    }
    fn range(&mut self, start: usize, end: usize) {
        self.0.write_u8(3);
        self.0.write_u64(start as u64);
        self.0.write_u64(end as u64);
    }
}

struct TextSink(String);

impl TextSink {
    fn sep(&mut self) {
        if !self.0.is_empty() {
            self.0.push('-');
        }
    }
}

impl KeySink for TextSink {
    fn op(&mut self, name: &str) {
        self.sep();
        self.0.push_str(name);
    }
    fn node(&mut self, id: NodeId) {
        self.sep();
        let _ = write!(self.0, "node{}", id.0);
    }
    fn shape(&mut self, shape: Shape) {
        self.sep();
        let _ = write!(self.0, "{shape}");
    }
    fn range(&mut self, start: usize, end: usize) {
        self.sep();
        let _ = write!(self.0, "{start}:{end}");
    }
}

fn write_key(dag: &Dag, op: &OpKind, inputs: &[NodeId], id: NodeId, sink: &mut impl KeySink) -> SigClass {
    let shape_of = |n: NodeId| dag.node(n).shape;
    match op {
        OpKind::InputConst | OpKind::Parameter(_) | OpKind::PickElement { .. } => {
            sink.op("unbatchable");
            sink.node(id);
            SigClass::Unbatchable
        }
        OpKind::Elementwise(e) => {
            sink.op(e.name());
            SigClass::Componentwise
        }
        OpKind::MatMul | OpKind::Affine => {
            let shared = shared_positions(op);
            let any_shared = shared.iter().any(|&p| dag.is_parameter(inputs[p]));
            sink.op(op.name());
            for (pos, &input) in inputs.iter().enumerate() {
                if any_shared && shared.contains(&pos) && dag.is_parameter(input) {
                    sink.node(input);
                } else {
                    sink.shape(shape_of(input));
                }
            }
            if any_shared {
                SigClass::SharedElement
            } else {
                SigClass::DimensionSensitive
            }
        }
        OpKind::Lookup { .. } => {
            sink.op(op.name());
            sink.node(inputs[0]);
            sink.shape(shape_of(inputs[0]));
            SigClass::DimensionSensitive
        }
        OpKind::Slice { start, end } => {
            sink.op(op.name());
            sink.shape(shape_of(inputs[0]));
            sink.range(*start, *end);
            SigClass::DimensionSensitive
        }
        OpKind::BroadcastAddCol
        | OpKind::ConcatCols
        | OpKind::ConcatRows
        | OpKind::SqEuclidean
        | OpKind::MaskedLoss
        | OpKind::SumLosses
        | OpKind::PickNegLogSoftmax { .. } => {
            sink.op(op.name());
            for &input in inputs {
                sink.shape(shape_of(input));
            }
            SigClass::DimensionSensitive
        }
    }
}

/// Signature of a node about to be appended as `id`.
pub(crate) fn compute(dag: &Dag, op: &OpKind, inputs: &[NodeId], id: NodeId) -> Signature {
    let mut sink = HashSink(DefaultHasher::new());
    let class = write_key(dag, op, inputs, id, &mut sink);
    Signature { hash: sink.0.finish(), class }
}

pub fn signature_of(dag: &Dag, id: NodeId) -> Signature {
    let node = dag.node(id);
    compute(dag, &node.op, dag.inputs(id), id)
}

/// Readable form of the full signature key. Equal keys ⇔ equal signatures,
/// up to 64-bit hash collisions.
pub fn signature_key(dag: &Dag, id: NodeId) -> String {
    let node = dag.node(id);
    let mut sink = TextSink(String::new());
    write_key(dag, &node.op, dag.inputs(id), id, &mut sink);
    sink.0
}
