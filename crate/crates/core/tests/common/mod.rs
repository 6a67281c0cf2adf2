#![allow(dead_code)]

use autobatch::tensor::max_rel_diff;
use autobatch::{BatchMode, Graph, NodeId, ParameterStore, Result};

pub const TOL: f64 = 1e-9;

pub struct Outcome {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub graph: Graph<f64>,
}

/// Builds a fresh graph, evaluates it under `mode` and backpropagates into a
/// copy of `store`.
pub fn run<F>(store: &ParameterStore<f64>, mode: BatchMode, build: F) -> Result<Outcome>
where
    F: FnOnce(&mut Graph<f64>, &ParameterStore<f64>) -> Result<NodeId>,
{
    let mut store = store.clone();
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = build(&mut graph, &store)?;
    let loss_value = graph.forward(&store, &[loss], mode)?[&loss].item();
    graph.backward(&mut store, loss)?;
    let grads = store.ids().map(|p| store.gradient(p).data().to_vec()).collect();
    Ok(Outcome { loss: loss_value, grads, graph })
}

/// Worst relative difference of loss and gradients between two outcomes.
pub fn worst_diff(a: &Outcome, b: &Outcome) -> f64 {
    let mut worst = max_rel_diff(&[a.loss], &[b.loss]);
    for (ga, gb) in a.grads.iter().zip(&b.grads) {
        worst = worst.max(max_rel_diff(ga, gb));
    }
    worst
}
