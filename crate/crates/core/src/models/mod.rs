//! Model programs written per instance, the way a user of a define-by-run
//! framework would, plus the hand-batched regression oracle and data.

pub mod data;
pub mod lstm;
pub mod rnn;
pub mod tagger;
pub mod tree;

pub use data::{generate_synthetic, Dataset, Lengths, SyntheticTask};
pub use lstm::{LstmParams, LstmState};
pub use rnn::{pad_batch, rnn_regression_batch_loss_manual, rnn_regression_loss, PaddedBatch, RnnDims, RnnRegressionParams, SequenceInstance};
pub use tagger::{bilstm_tagger_loss, TaggedSequence, TaggerDims, TaggerParams};
pub use tree::{treelstm_loss, Tree, TreeDims, TreeLstmParams};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Real;

/// Builds each instance's loss into `g` and sums them.
pub fn batch_loss<T: Real, X>(
    g: &mut Graph<T>,
    items: &[X],
    mut loss: impl FnMut(&mut Graph<T>, &X) -> Result<NodeId>,
) -> Result<NodeId> {
    let losses = items.iter().map(|x| loss(g, x)).collect::<Result<Vec<_>>>()?;
    g.sum_losses(&losses)
}
