use thiserror::Error;

use crate::graph::NodeId;
use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs} and {rhs}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: invalid shape {shape}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Shape,
        reason: String,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: String,
        got: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: domain error, {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("unknown parameter {0}")]
    UnknownParameter(usize),
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("kernel failure at plan step {step}, node {node:?}: {source}")]
    Kernel {
        step: usize,
        node: NodeId,
        #[source]
        source: Box<Error>,
    },
    #[error("internal scheduling error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: Shape, rhs: Shape) -> Self {
        Error::Dimension { op, lhs, rhs }
    }
}
