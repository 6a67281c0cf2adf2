use autobatch::{tensor, BatchMode};
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, Scale, Task};
use crate::report::{render_checks, render_table, Check, TimingReport};
use crate::runner::{run_benchmark, tolerance};
use crate::BenchError;

/// Minimum agenda-over-sequential throughput ratio at paper scale.
pub const SPEEDUP_TARGET: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: BatchMode,
    /// Throughput relative to the `none` row.
    pub speedup: f64,
    pub report: TimingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// The shared configuration; its `mode` is ignored.
    pub config: BenchConfig,
    pub rows: Vec<ModeRow>,
    pub checks: Vec<Check>,
}

impl Comparison {
    pub fn row(&self, mode: BatchMode) -> &ModeRow {
        self.rows.iter().find(|r| r.mode == mode).expect("every mode has a row")
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "task {}  batch {}  iters {}  precision {}  scale {}  lengths {}  seed {}\n\n",
            c.task, c.batch_size, c.iters, c.precision, c.scale, c.lengths, c.seed
        );
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let p = &r.report.phases_ms;
                vec![
                    r.mode.to_string(),
                    format!("{:.2}", r.report.instances_per_sec),
                    format!("{:.2}x", r.speedup),
                    format!("{:.1}", r.report.groups_per_step),
                    r.report.max_group_size.to_string(),
                    format!("{:.1}", p.construction_scheduling),
                    format!("{:.1}", p.forward),
                    format!("{:.1}", p.backward_graph),
                    format!("{:.1}", p.backward),
                    format!("{:.1}", p.update),
                    format!("{:.1}", r.report.total_ms),
                ]
            })
            .collect();
        out.push_str(&render_table(
            &["mode", "inst/s", "vs none", "groups", "max grp", "build ms", "fwd ms", "bgraph ms", "bwd ms", "upd ms", "total ms"],
            &rows,
        ));
        out.push('\n');
        render_checks(&mut out, &self.checks);
        out
    }
}

/// Runs the same configuration under all three modes.
pub fn compare_modes(cfg: &BenchConfig) -> Result<Comparison, BenchError> {
    let mut reports = Vec::new();
    for mode in BatchMode::ALL {
        reports.push((mode, run_benchmark(&BenchConfig { mode, ..cfg.clone() })?));
    }
    let base = reports.iter().find(|(m, _)| *m == BatchMode::None).expect("none runs").1.instances_per_sec;
    let rows: Vec<ModeRow> = reports
        .into_iter()
        .map(|(mode, report)| ModeRow { mode, speedup: report.instances_per_sec / base, report })
        .collect();
    let mut cmp = Comparison { config: cfg.clone(), rows, checks: Vec::new() };
    cmp.checks = comparison_checks(&cmp);
    Ok(cmp)
}

fn comparison_checks(cmp: &Comparison) -> Vec<Check> {
    let cfg = &cmp.config;
    let none = &cmp.row(BatchMode::None).report;
    let depth = &cmp.row(BatchMode::Depth).report;
    let agenda = cmp.row(BatchMode::Agenda);
    let tol = tolerance(cfg.precision);

    let mut checks = Vec::new();
    if cfg.scale == Scale::Paper {
        checks.push(Check {
            name: "agenda throughput".into(),
            passed: agenda.speedup >= SPEEDUP_TARGET,
            detail: format!("{:.2}x none (target {SPEEDUP_TARGET}x)", agenda.speedup),
        });
    }
    if matches!(cfg.task, Task::Bilstm | Task::BilstmChar) {
        checks.push(Check {
            name: "agenda groups <= depth groups".into(),
            passed: agenda.report.groups_per_step <= depth.groups_per_step,
            detail: format!("{:.1} vs {:.1} per step", agenda.report.groups_per_step, depth.groups_per_step),
        });
    }
    for (mode, other) in [(BatchMode::Depth, depth), (BatchMode::Agenda, &agenda.report)] {
        let delta = tensor::max_rel_diff(&none.loss_trajectory, &other.loss_trajectory);
        checks.push(Check {
            name: format!("loss trajectory {mode} = none"),
            passed: none.loss_trajectory.len() == other.loss_trajectory.len() && delta <= tol,
            detail: format!("relative delta {delta:.3e} (tolerance {tol:e})"),
        });
    }
    // Per-mode checks (oracle delta, within-instance batching, overhead) carry over.
    for row in &cmp.rows {
        for c in &row.report.checks {
            let mut c = c.clone();
            c.name = format!("{}: {}", row.mode, c.name);
            checks.push(c);
        }
    }
    if cfg.task == Task::Treelstm && cfg.batch_size == 1 {
        checks.retain(|c| !c.name.starts_with("none: within-instance"));
    }
    checks
}
