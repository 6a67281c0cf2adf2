use std::time::{Duration, Instant};

use autobatch::models::data::{FIXED_LENGTH, VARIABLE_LENGTHS};
use autobatch::models::{
    batch_loss, bilstm_tagger_loss, generate_synthetic, pad_batch, rnn_regression_batch_loss_manual,
    rnn_regression_loss, treelstm_loss, Dataset, Lengths, RnnDims, RnnRegressionParams, SyntheticTask, TaggerDims,
    TaggerParams, TreeDims, TreeLstmParams,
};
use autobatch::{tensor, BatchMode, Counters, ExecOptions, Graph, NodeId, ParameterStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, LengthRegime, Precision, Scale, Task};
use crate::report::{Check, PhaseMillis, TimingReport};
use crate::BenchError;

pub const F64_TOLERANCE: f64 = 1e-9;
pub const F32_TOLERANCE: f64 = 1e-4;
/// Ceiling on the construction+scheduling share of a step.
pub const OVERHEAD_LIMIT: f64 = 0.35;

pub fn tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => F64_TOLERANCE,
        Precision::F32 => F32_TOLERANCE,
    }
}

pub fn rnn_dims(scale: Scale) -> RnnDims {
    match scale {
        Scale::Desk => RnnDims { hidden: 32, input: 16, output: 4 },
        Scale::Paper => RnnDims { hidden: 256, input: 256, output: 16 },
    }
}

fn tagger_dims(scale: Scale) -> TaggerDims {
    match scale {
        Scale::Desk => TaggerDims::desk(),
        Scale::Paper => TaggerDims::paper(),
    }
}

fn tree_dims(scale: Scale) -> TreeDims {
    match scale {
        Scale::Desk => TreeDims::desk(),
        Scale::Paper => TreeDims::paper(),
    }
}

fn lengths(regime: LengthRegime) -> Lengths {
    match regime {
        LengthRegime::Fixed => Lengths::Fixed(FIXED_LENGTH),
        LengthRegime::Variable => Lengths::Uniform(VARIABLE_LENGTHS.0, VARIABLE_LENGTHS.1),
    }
}

fn synthetic_task(task: Task, scale: Scale) -> SyntheticTask {
    match task {
        Task::RnnReg => {
            let d = rnn_dims(scale);
            SyntheticTask::Regression { input: d.input, output: d.output }
        }
        Task::Bilstm | Task::BilstmChar => {
            let d = tagger_dims(scale);
            SyntheticTask::Tagging { vocab: d.vocab, labels: d.labels, chars: d.chars }
        }
        Task::Treelstm => {
            let d = tree_dims(scale);
            SyntheticTask::Trees { vocab: d.vocab, labels: d.labels }
        }
    }
}

/// Enough data for one batch per step. Instance `i` of every run is the same.
pub fn dataset<T: Real>(cfg: &BenchConfig) -> Dataset<T> {
    generate_synthetic(synthetic_task(cfg.task, cfg.scale), lengths(cfg.lengths), cfg.batch_size * cfg.iters, cfg.seed)
}

enum Model {
    Rnn(RnnRegressionParams),
    Tagger(TaggerParams, bool),
    Tree(TreeLstmParams),
}

/// Parameters are drawn from the seed, so every run and mode starts identically.
fn init_model<T: Real>(cfg: &BenchConfig) -> Result<(ParameterStore<T>, Model), BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut store = ParameterStore::new();
    let model = match cfg.task {
        Task::RnnReg => Model::Rnn(RnnRegressionParams::new(&mut store, rnn_dims(cfg.scale), &mut rng)),
        Task::Bilstm | Task::BilstmChar => {
            let with_char = cfg.task == Task::BilstmChar;
            Model::Tagger(TaggerParams::new(&mut store, tagger_dims(cfg.scale), with_char, &mut rng)?, with_char)
        }
        Task::Treelstm => Model::Tree(TreeLstmParams::new(&mut store, tree_dims(cfg.scale), &mut rng)),
    };
    Ok((store, model))
}

fn build_batch<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    model: &Model,
    data: &Dataset<T>,
    range: std::ops::Range<usize>,
) -> Result<NodeId, BenchError> {
    let loss = match (model, data) {
        (Model::Rnn(p), Dataset::Regression(d)) => batch_loss(g, &d[range], |g, x| rnn_regression_loss(g, store, x, p)),
        (Model::Tagger(p, c), Dataset::Tagged(d)) => {
            batch_loss(g, &d[range], |g, x| bilstm_tagger_loss(g, store, x, p, *c))
        }
        (Model::Tree(p), Dataset::Trees(d)) => batch_loss(g, &d[range], |g, x| treelstm_loss(g, store, x, p)),
        _ => unreachable!("dataset and model come from the same task"),
    };
    Ok(loss?)
}

#[derive(Debug, Clone, Default)]
struct RunStats {
    phases: PhaseMillis,
    wall: Duration,
    counters: Counters,
    nodes: usize,
    groups: usize,
    max_group: usize,
    losses: Vec<f64>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// `g` is reused across steps and runs so its buffers stay allocated, as a
/// long training loop's would.
fn one_run<T: Real>(cfg: &BenchConfig, data: &Dataset<T>, g: &mut Graph<T>) -> Result<RunStats, BenchError> {
    let (mut store, model) = init_model::<T>(cfg)?;
    let eta = T::from_f64_lossy(cfg.eta);
    let mut stats = RunStats::default();
    let start = Instant::now();
    for step in 0..cfg.iters {
        let range = step * cfg.batch_size..(step + 1) * cfg.batch_size;
        let t0 = Instant::now();
        g.clear();
        let loss = build_batch(g, &store, &model, data, range)?;
        let construction = t0.elapsed();

        let value = g.forward(&store, &[loss], cfg.mode)?[&loss].item();
        g.backward(&mut store, loss)?;
        let t1 = Instant::now();
        store.sgd_update(eta);
        let update = t1.elapsed();

        let times = g.phase_times();
        let p = &mut stats.phases;
        p.construction_scheduling += ms(construction + times.schedule);
        p.forward += ms(times.forward);
        p.backward_graph += ms(times.backward_prep);
        p.backward += ms(times.backward);
        p.update += ms(update);
        stats.counters.merge(g.counters());
        stats.nodes += g.node_count();
        for plan in g.plans() {
            stats.groups += plan.group_count();
            stats.max_group = stats.max_group.max(plan.max_group_size());
        }
        stats.losses.push(value.as_f64());
    }
    stats.wall = start.elapsed();
    Ok(stats)
}

/// Relative gap between the autobatched loss of the first batch and the
/// hand-batched padded program on the same initial parameters.
fn manual_oracle_delta<T: Real>(cfg: &BenchConfig, data: &Dataset<T>) -> Result<f64, BenchError> {
    let (store, model) = init_model::<T>(cfg)?;
    let (Model::Rnn(params), Dataset::Regression(d)) = (&model, data) else {
        unreachable!("called for rnn-reg only")
    };
    let batch = &d[..cfg.batch_size];
    let mut g = Graph::<T>::new();
    let loss = batch_loss(&mut g, batch, |g, x| rnn_regression_loss(g, &store, x, params))?;
    let auto = g.forward(&store, &[loss], cfg.mode)?[&loss].item().as_f64();
    let manual = rnn_regression_batch_loss_manual(&pad_batch(batch)?, &store, params)?.as_f64();
    Ok(tensor::max_rel_diff(&[auto], &[manual]))
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn run_typed<T: Real>(cfg: &BenchConfig) -> Result<TimingReport, BenchError> {
    let data = dataset::<T>(cfg);
    let mut g = Graph::with_options(ExecOptions::default());
    for _ in 0..cfg.warmup_runs {
        one_run(cfg, &data, &mut g)?;
    }
    let runs = (0..cfg.runs).map(|_| one_run(cfg, &data, &mut g)).collect::<Result<Vec<_>, _>>()?;
    let runs_ms: Vec<f64> = runs.iter().map(|r| ms(r.wall)).collect();
    let (mean_ms, stdev_ms) = mean_stdev(&runs_ms);
    let best = runs.into_iter().min_by_key(|r| r.wall).expect("at least one run");
    let total_ms = ms(best.wall);
    let steps = cfg.iters as f64;

    let manual_oracle_delta = match cfg.task {
        Task::RnnReg => Some(manual_oracle_delta(cfg, &data)?),
        _ => None,
    };

    let tol = tolerance(cfg.precision);
    let mut checks = vec![
        Check {
            name: "losses finite".into(),
            passed: best.losses.iter().all(|l| l.is_finite()),
            detail: format!("{} steps", best.losses.len()),
        },
        Check {
            name: "phase sum within wall time".into(),
            passed: best.phases.sum() <= total_ms,
            detail: format!("{:.2} ms of {:.2} ms", best.phases.sum(), total_ms),
        },
    ];
    if let Some(d) = manual_oracle_delta {
        checks.push(Check {
            name: "manual-batch oracle".into(),
            passed: d <= tol,
            detail: format!("relative delta {d:.3e} (tolerance {tol:e})"),
        });
    }
    if cfg.task == Task::Treelstm && cfg.batch_size == 1 && cfg.mode != BatchMode::None {
        checks.push(Check {
            name: "within-instance batching".into(),
            passed: best.max_group >= 2,
            detail: format!("max group size {}", best.max_group),
        });
    }
    if cfg.scale == Scale::Paper && cfg.mode != BatchMode::None {
        let share = best.phases.construction_scheduling / total_ms;
        checks.push(Check {
            name: "scheduling overhead".into(),
            passed: share <= OVERHEAD_LIMIT,
            detail: format!("{:.1}% of step time (limit {:.0}%)", 100.0 * share, 100.0 * OVERHEAD_LIMIT),
        });
    }

    Ok(TimingReport {
        phases_ms: best.phases,
        total_ms,
        runs_ms,
        mean_ms,
        stdev_ms,
        instances_per_sec: (cfg.batch_size * cfg.iters) as f64 / best.wall.as_secs_f64(),
        counters: best.counters,
        nodes_per_step: best.nodes as f64 / steps,
        groups_per_step: best.groups as f64 / steps,
        max_group_size: best.max_group,
        loss_trajectory: best.losses,
        manual_oracle_delta,
        checks,
    })
}

/// Warms up, times `cfg.runs` training runs of `cfg.iters` steps each and
/// reports the fastest. Dataset generation is not timed.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<TimingReport, BenchError> {
    cfg.validate().map_err(BenchError::Config)?;
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg),
        Precision::F32 => run_typed::<f32>(cfg),
    }
}

/// Graph dump and plan dump of the first training step.
pub fn first_step_artifacts(cfg: &BenchConfig) -> Result<(String, String), BenchError> {
    cfg.validate().map_err(BenchError::Config)?;
    fn typed<T: Real>(cfg: &BenchConfig) -> Result<(String, String), BenchError> {
        let one = BenchConfig { iters: 1, ..cfg.clone() };
        let data = dataset::<T>(&one);
        let (store, model) = init_model::<T>(&one)?;
        let mut g = Graph::<T>::new();
        let loss = build_batch(&mut g, &store, &model, &data, 0..one.batch_size)?;
        g.forward(&store, &[loss], one.mode)?;
        let plans: String = g.plans().iter().map(|p| p.dump()).collect();
        Ok((g.dump(), plans))
    }
    match cfg.precision {
        Precision::F64 => typed::<f64>(cfg),
        Precision::F32 => typed::<f32>(cfg),
    }
}
