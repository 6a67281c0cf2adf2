//! Automatic operation batching for dynamic computation graphs.
//!
//! Build a [`Graph`] one node at a time, as a define-by-run framework would,
//! then ask for values. Pending nodes are grouped by [`Signature`] and each
//! group runs as a single batched kernel. Gradients follow the same groups
//! in reverse.

pub mod corpus;
pub mod error;
pub mod executor;
pub mod graph;
pub mod kernels;
pub mod models;
pub mod params;
pub mod scheduler;
pub mod signature;
pub mod tensor;

pub use error::{Error, Result};
pub use executor::{Counters, ExecOptions};
pub use graph::{Dag, Graph, Node, NodeId, OpKind, PhaseTimes};
pub use kernels::ElemOp;
pub use params::{ParamId, ParameterSlot, ParameterStore};
pub use scheduler::{BatchGroup, BatchMode, ExecutionPlan};
pub use signature::{SigClass, Signature};
pub use tensor::{Real, Shape, Tensor};
