//! Lazy evaluation, batching behaviour, instrumentation and error reporting.

mod common;

use autobatch::models::*;
use autobatch::tensor::{max_rel_diff, Tensor};
use autobatch::{BatchMode, Error, Graph, NodeId, ParameterStore, Shape};
use common::{run, TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rnn(dims: RnnDims, seed: u64) -> (ParameterStore<f64>, RnnRegressionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let p = RnnRegressionParams::new(&mut store, dims, &mut rng);
    (store, p)
}

fn sequences(lengths: &[usize], dims: RnnDims, seed: u64) -> Vec<SequenceInstance> {
    lengths
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| {
            let task = SyntheticTask::Regression { input: dims.input, output: dims.output };
            match generate_synthetic::<f64>(task, Lengths::Fixed(n), 1, seed + i as u64) {
                Dataset::Regression(d) => d,
                _ => unreachable!(),
            }
        })
        .collect()
}

#[test]
fn second_forward_without_new_nodes_runs_nothing() {
    let (store, p) = rnn(RnnDims { hidden: 4, input: 2, output: 1 }, 1);
    let data = sequences(&[3, 2], p.dims, 1);
    let mut g = Graph::new();
    let l = batch_loss(&mut g, &data, |g, i| rnn_regression_loss(g, &store, i, &p)).unwrap();
    let first = g.forward(&store, &[l], BatchMode::Agenda).unwrap()[&l].clone();
    let before = *g.counters();
    assert!(before.kernel_invocations > 0);
    let second = g.forward(&store, &[l], BatchMode::Agenda).unwrap()[&l].clone();
    assert_eq!(g.counters().kernel_invocations, before.kernel_invocations);
    assert_eq!(*g.counters(), before);
    assert_eq!(first, second);
    assert_eq!(g.plans().len(), 1);
}

#[test]
fn extending_the_graph_evaluates_only_the_suffix() {
    let mut store = ParameterStore::new();
    let w = store.add("W", Tensor::matrix(2, 2, vec![0.5, -0.3, 0.2, 0.9]).unwrap());
    let mut g = Graph::new();
    let wn = g.parameter(&store, w).unwrap();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let h1 = g.matmul(wn, x).unwrap();
    let t1 = g.tanh(h1).unwrap();
    let v1 = g.forward(&store, &[t1], BatchMode::Agenda).unwrap()[&t1].clone();
    let c1 = *g.counters();
    assert_eq!(c1.kernel_invocations, 2);
    assert_eq!(g.watermark(), g.node_count());

    // Two independent tanh nodes and one product: three nodes, two groups.
    let a = g.tanh(t1).unwrap();
    let b = g.tanh(h1).unwrap();
    let s = g.mul(a, b).unwrap();
    let out = g.forward(&store, &[s, t1], BatchMode::Agenda).unwrap();
    let c2 = *g.counters();
    assert_eq!(c2.kernel_invocations - c1.kernel_invocations, 2);
    assert_eq!(c2.nodes_executed - c1.nodes_executed, 3);
    assert_eq!(g.plans().len(), 2);
    assert_eq!(g.plans()[1].group_count(), 2);
    assert_eq!(out[&t1], v1, "evaluated values never change");

    let h = g.value(&store, h1).unwrap();
    let expect: Vec<f64> = v1.data().iter().zip(h.data()).map(|(t, h): (&f64, &f64)| t.tanh() * h.tanh()).collect();
    assert!(max_rel_diff(out[&s].data(), &expect) <= 1e-15);

    // Backward covers nodes from both forward calls.
    let mut store2 = store.clone();
    assert!(matches!(g.sum_losses(&[s]), Err(Error::InvalidShape { .. })), "sum_losses needs scalars");
    let l = g.sq_euclidean(s, x).unwrap();
    g.forward(&store2, &[l], BatchMode::Agenda).unwrap();
    g.backward(&mut store2, l).unwrap();
    assert!(store2.gradient(w).data().iter().any(|v| *v != 0.0));
}

/// Three sequences of lengths 2, 3 and 4 through one shared RNN cell.
fn figure_two(mode: BatchMode) -> (Graph<f64>, Vec<NodeId>, f64) {
    let dims = RnnDims { hidden: 4, input: 3, output: 2 };
    let (store, p) = rnn(dims, 2);
    let data = sequences(&[2, 3, 4], dims, 2);
    let mut g = Graph::new();
    let losses: Vec<NodeId> = data.iter().map(|i| rnn_regression_loss(&mut g, &store, i, &p).unwrap()).collect();
    let total = g.sum_losses(&losses).unwrap();
    let v = g.forward(&store, &[total], mode).unwrap()[&total].item();
    (g, losses, v)
}

fn groups_holding(g: &Graph<f64>, nodes: &[NodeId]) -> usize {
    g.plans()[0].groups.iter().filter(|grp| grp.members.iter().any(|m| nodes.contains(m))).count()
}

#[test]
fn figure_two_losses_batch_under_agenda_only() {
    let (agenda, losses, va) = figure_two(BatchMode::Agenda);
    assert_eq!(groups_holding(&agenda, &losses), 1);
    let (depth, losses_d, vd) = figure_two(BatchMode::Depth);
    assert_eq!(groups_holding(&depth, &losses_d), 3);
    let (_, _, vn) = figure_two(BatchMode::None);
    assert!(max_rel_diff(&[va], &[vn]) <= TOL && max_rel_diff(&[vd], &[vn]) <= TOL);
}

fn symmetric_plan(b: usize) -> (Graph<f64>, u64) {
    let dims = RnnDims { hidden: 4, input: 3, output: 2 };
    let (store, p) = rnn(dims, 3);
    let data = sequences(&vec![5; b], dims, 3);
    let mut g = Graph::new();
    let l = batch_loss(&mut g, &data, |g, i| rnn_regression_loss(g, &store, i, &p)).unwrap();
    g.forward(&store, &[l], BatchMode::Agenda).unwrap();
    let inv = g.counters().kernel_invocations;
    (g, inv)
}

#[test]
fn identical_sequences_give_batch_independent_plans() {
    let (g1, inv1) = symmetric_plan(1);
    let count = g1.plans()[0].group_count();
    for b in [2, 64] {
        let (g, inv) = symmetric_plan(b);
        let plan = &g.plans()[0];
        assert_eq!(plan.group_count(), count, "b = {b}");
        assert_eq!(inv, inv1);
        let dag = g.dag();
        for grp in &plan.groups {
            let op = dag.node(grp.members[0]).op.name();
            if op != "sum_losses" {
                assert_eq!(grp.members.len(), b, "{op} group at b = {b}");
            }
        }
    }
}

#[test]
fn identical_graphs_give_identical_plans() {
    let (a, _, _) = figure_two(BatchMode::Agenda);
    let (b, _, _) = figure_two(BatchMode::Agenda);
    assert_eq!(a.plans(), b.plans());
    assert_eq!(a.plans()[0].dump(), b.plans()[0].dump());
}

#[test]
fn adjacent_operands_are_read_in_place() {
    let mut store = ParameterStore::new();
    let w = store.add("W", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
    let mut g = Graph::new();
    let wn = g.parameter(&store, w).unwrap();
    let xs: Vec<NodeId> = (0..3).map(|i| g.input(Tensor::vector(vec![i as f64, 1.0, -0.5]))).collect();
    let hs: Vec<NodeId> = xs.iter().map(|&x| g.tanh(x).unwrap()).collect();
    let ys: Vec<NodeId> = hs.iter().map(|&h| g.matmul(wn, h).unwrap()).collect();
    g.forward(&store, &ys, BatchMode::Agenda).unwrap();
    let c = g.counters();
    assert_eq!(g.plans()[0].group_count(), 2);
    assert_eq!(c.gather_copies, 0);
    assert_eq!(c.gather_views, 2);
    assert_eq!(c.bytes_copied, 0);
}

#[test]
fn scattered_operands_are_copied_once() {
    let mut store = ParameterStore::new();
    let w = store.add("W", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
    let mut g = Graph::new();
    let wn = g.parameter(&store, w).unwrap();
    let mut xs = Vec::new();
    for i in 0..3 {
        xs.push(g.input(Tensor::vector(vec![i as f64, 1.0, -0.5])));
        g.input(Tensor::vector(vec![9.0]));
    }
    let ys: Vec<NodeId> = xs.iter().map(|&x| g.matmul(wn, x).unwrap()).collect();
    let out = g.forward(&store, &ys, BatchMode::Agenda).unwrap();
    let c = g.counters();
    assert_eq!(g.plans()[0].group_count(), 1);
    assert_eq!(c.gather_copies, 1);
    assert_eq!(c.bytes_copied, 3 * 3 * 8);
    assert_eq!(out[&ys[2]].data(), &[2.0 + 2.0 - 1.5, -2.0 + 0.5]);
}

#[test]
fn singleton_groups_skip_gathering() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![0.5, -2.0]));
    let t = g.tanh(x).unwrap();
    let v = g.forward(&ParameterStore::new(), &[t], BatchMode::Agenda).unwrap()[&t].clone();
    assert_eq!(v.data(), &[0.5f64.tanh(), (-2.0f64).tanh()]);
    let c = g.counters();
    assert_eq!((c.kernel_invocations, c.gather_copies, c.gather_views), (1, 0, 0));
}

#[test]
fn shared_parameter_gradients_sum_over_members() {
    let mut store = ParameterStore::new();
    let w = store.add("W", Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
    let inputs: Vec<Vec<f64>> = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 0.5], vec![0.2, 0.2, -0.7]];
    let build = |g: &mut Graph<f64>, s: &ParameterStore<f64>, which: &[usize]| {
        let wn = g.parameter(s, w)?;
        let target = g.input(Tensor::vector(vec![0.3, -0.1]));
        let losses = which
            .iter()
            .map(|&i| {
                let x = g.input(Tensor::vector(inputs[i].clone()));
                let y = g.matmul(wn, x)?;
                g.sq_euclidean(y, target)
            })
            .collect::<autobatch::Result<Vec<_>>>()?;
        g.sum_losses(&losses)
    };
    let batched = run(&store, BatchMode::Agenda, |g, s| build(g, s, &[0, 1, 2])).unwrap();
    let matmul_group = batched.graph.plans()[0].groups.iter().find(|grp| grp.members.len() == 3);
    assert!(matmul_group.is_some(), "the three products form one group");
    let mut looped = vec![0.0; 6];
    for i in 0..3 {
        let one = run(&store, BatchMode::None, |g, s| build(g, s, &[i])).unwrap();
        looped.iter_mut().zip(&one.grads[0]).for_each(|(a, b)| *a += b);
    }
    assert!(max_rel_diff(&batched.grads[0], &looped) <= TOL);
}

#[test]
fn simple_gradients() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::vector(vec![3.0, 4.0]));
    let unused = store.add("q", Tensor::vector(vec![1.0, 1.0, 1.0]));
    let out = run(&store, BatchMode::Agenda, |g, s| {
        let pn = g.parameter(s, p)?;
        g.parameter(s, unused)?;
        let zero = g.input(Tensor::zeros(Shape::vector(2)));
        g.sq_euclidean(pn, zero)
    })
    .unwrap();
    assert_eq!(out.loss, 25.0);
    assert_eq!(out.grads[0], vec![6.0, 8.0]);
    assert_eq!(out.grads[1], vec![0.0; 3]);

    let out = run(&store, BatchMode::Agenda, |g, s| {
        let pn = g.parameter(s, p)?;
        let zero = g.input(Tensor::zeros(Shape::vector(2)));
        let l = g.sq_euclidean(pn, zero)?;
        let one = g.sum_losses(&[l])?;
        g.sum_losses(&[one, one, one])
    })
    .unwrap();
    assert_eq!(out.loss, 75.0);
    assert_eq!(out.grads[0], vec![18.0, 24.0]);
}

#[test]
fn sgd_steps() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::vector(vec![3.0, 4.0]));
    let step = |store: &mut ParameterStore<f64>, eta: f64| {
        let mut g = Graph::new();
        let pn = g.parameter(store, p).unwrap();
        let zero = g.input(Tensor::zeros(Shape::vector(2)));
        let l = g.sq_euclidean(pn, zero).unwrap();
        g.forward(store, &[l], BatchMode::Agenda).unwrap();
        g.backward(store, l).unwrap();
        store.sgd_update(eta);
    };
    let mut one = store.clone();
    step(&mut one, 0.1);
    assert!(max_rel_diff(one.value(p).data(), &[2.4, 3.2]) <= 1e-15);
    assert_eq!(one.gradient(p).data(), &[0.0, 0.0]);

    // On ||p||² a step scales p by (1 − 2η): two half steps give (1 − η)², not 1 − 2η.
    let mut halves = store.clone();
    step(&mut halves, 0.05);
    step(&mut halves, 0.05);
    let expect: Vec<f64> = [3.0, 4.0].iter().map(|v| v * 0.9f64.powi(2)).collect();
    assert!(max_rel_diff(halves.value(p).data(), &expect) <= 1e-15);
    assert!(max_rel_diff(halves.value(p).data(), one.value(p).data()) > 1e-3);
}

#[test]
fn kernel_errors_name_step_and_member() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::vector(vec![1.0, 2.0]));
    let b = g.input(Tensor::vector(vec![3.0, -1.0]));
    let la = g.log(a).unwrap();
    let lb = g.log(b).unwrap();
    let err = g.forward(&ParameterStore::new(), &[la], BatchMode::Agenda).unwrap_err();
    match err {
        Error::Kernel { step, node, source } => {
            assert_eq!(step, 0);
            assert_eq!(node, lb);
            assert!(matches!(*source, Error::Domain { op: "log", .. }));
        }
        other => panic!("unexpected {other:?}"),
    }

    let mut g = Graph::<f64>::new();
    let big = g.input(Tensor::vector(vec![1e200]));
    let t = g.tanh(big).unwrap();
    let sq = g.square(big).unwrap();
    let err = g.forward(&ParameterStore::new(), &[t, sq], BatchMode::None).unwrap_err();
    assert!(matches!(err, Error::Kernel { node, ref source, .. } if node == sq && matches!(**source, Error::NonFinite { .. })));
}

#[test]
fn backward_contracts() {
    let mut store = ParameterStore::<f64>::new();
    let px = store.add("x", Tensor::vector(vec![1.0, 2.0]));
    let mut g = Graph::new();
    let x = g.parameter(&store, px).unwrap();
    let t = g.tanh(x).unwrap();
    let zero = g.input(Tensor::zeros(Shape::vector(2)));
    let l = g.sq_euclidean(t, zero).unwrap();
    assert!(matches!(g.backward(&mut store, l), Err(Error::Contract(_))));
    g.forward(&store, &[l], BatchMode::Agenda).unwrap();
    assert!(matches!(g.backward(&mut store, t), Err(Error::Contract(_))));
    g.backward(&mut store, l).unwrap();
    let dx = g.node_gradient(t).unwrap();
    assert!(max_rel_diff(dx.data(), &[2.0 * 1f64.tanh(), 2.0 * 2f64.tanh()]) <= 1e-15);
}

#[test]
fn single_precision_agrees_with_sequential() {
    let dims = TaggerDims::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParameterStore::<f32>::new();
    let p = TaggerParams::new(&mut store, dims, true, &mut rng).unwrap();
    let task = SyntheticTask::Tagging { vocab: dims.vocab, labels: dims.labels, chars: dims.chars };
    let Dataset::Tagged(data) = generate_synthetic::<f32>(task, Lengths::Uniform(3, 12), 10, 22) else { unreachable!() };
    let loss = |mode| {
        let mut g = Graph::<f32>::new();
        let l = batch_loss(&mut g, &data, |g, i| bilstm_tagger_loss(g, &store, i, &p, true)).unwrap();
        g.forward(&store, &[l], mode).unwrap()[&l].item() as f64
    };
    let base = loss(BatchMode::None);
    for mode in [BatchMode::Depth, BatchMode::Agenda] {
        assert!(max_rel_diff(&[loss(mode)], &[base]) <= 1e-4);
    }
}

#[test]
fn parameter_updates_reach_later_batched_products() {
    let mut store = ParameterStore::new();
    let w = store.add("W", Tensor::matrix(2, 2, vec![0.5, -0.3, 0.2, 0.9]).unwrap());
    let xs = [Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![-1.0, 0.5])];
    let mut g = Graph::new();
    let wn = g.parameter(&store, w).unwrap();
    let batch = |g: &mut Graph<f64>, store: &ParameterStore<f64>| {
        let outs: Vec<NodeId> = xs
            .iter()
            .map(|x| {
                let x = g.input(x.clone());
                g.matmul(wn, x).unwrap()
            })
            .collect();
        let values = g.forward(store, &outs, BatchMode::Agenda).unwrap();
        outs.iter().map(|o| values[o].data().to_vec()).collect::<Vec<_>>()
    };
    batch(&mut g, &store);
    assert_eq!(g.plans()[0].group_count(), 1);

    store.slot_mut(w).unwrap().value = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let after = batch(&mut g, &store);
    assert_eq!(after, vec![vec![5.0, 11.0], vec![0.0, -1.0]]);
}
