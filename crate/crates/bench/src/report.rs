use std::fmt::Write as _;

use autobatch::Counters;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;

/// Milliseconds spent per phase, summed over the steps of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMillis {
    pub construction_scheduling: f64,
    pub forward: f64,
    pub backward_graph: f64,
    pub backward: f64,
    pub update: f64,
}

impl PhaseMillis {
    pub fn sum(&self) -> f64 {
        self.construction_scheduling + self.forward + self.backward_graph + self.backward + self.update
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Phases of the fastest run.
    pub phases_ms: PhaseMillis,
    /// Wall time of the fastest run.
    pub total_ms: f64,
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub stdev_ms: f64,
    pub instances_per_sec: f64,
    /// Counters from the fastest run, summed over its steps.
    pub counters: Counters,
    pub nodes_per_step: f64,
    pub groups_per_step: f64,
    pub max_group_size: usize,
    /// Loss before each update of the fastest run.
    pub loss_trajectory: Vec<f64>,
    /// Relative gap between the autobatched and the hand-batched loss (rnn-reg only).
    pub manual_oracle_delta: Option<f64>,
    pub checks: Vec<Check>,
}

impl TimingReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// The document written by `--report json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub config: BenchConfig,
    pub report: TimingReport,
}

pub(crate) fn render_checks(out: &mut String, checks: &[Check]) {
    for c in checks {
        let _ = writeln!(out, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

/// Pads each column to its widest cell.
pub(crate) fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).enumerate().map(|(i, (c, w))| {
            if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") }
        }).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut header.iter().copied());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in rows {
        line(&mut out, &mut row.iter().map(String::as_str));
    }
    out
}

impl BenchOutput {
    pub fn to_table(&self) -> String {
        let c = &self.config;
        let r = &self.report;
        let mut out = format!(
            "task {}  mode {}  batch {}  iters {}  precision {}  scale {}  lengths {}  seed {}\n\n",
            c.task, c.mode, c.batch_size, c.iters, c.precision, c.scale, c.lengths, c.seed
        );
        let p = &r.phases_ms;
        let ms = |v: f64| format!("{v:.2}");
        let share = |v: f64| format!("{:.1}%", 100.0 * v / r.total_ms.max(f64::MIN_POSITIVE));
        let rows = vec![
            vec!["construction+scheduling".into(), ms(p.construction_scheduling), share(p.construction_scheduling)],
            vec!["forward".into(), ms(p.forward), share(p.forward)],
            vec!["backward graph".into(), ms(p.backward_graph), share(p.backward_graph)],
            vec!["backward".into(), ms(p.backward), share(p.backward)],
            vec!["update".into(), ms(p.update), share(p.update)],
            vec!["total (fastest run)".into(), ms(r.total_ms), share(r.total_ms)],
        ];
        out.push_str(&render_table(&["phase", "ms", "share"], &rows));
        let _ = writeln!(
            out,
            "\ninstances/sec {:.2}  runs {}  mean {:.2} ms  stdev {:.2} ms",
            r.instances_per_sec,
            r.runs_ms.len(),
            r.mean_ms,
            r.stdev_ms
        );
        let k = &r.counters;
        let _ = writeln!(
            out,
            "groups/step {:.1}  nodes/step {:.1}  max group {}  kernels {}  gather copies {}  views {}  bytes copied {}",
            r.groups_per_step, r.nodes_per_step, r.max_group_size, k.kernel_invocations, k.gather_copies, k.gather_views, k.bytes_copied
        );
        if let Some(d) = r.manual_oracle_delta {
            let _ = writeln!(out, "manual-batch oracle relative delta {d:.3e}");
        }
        if let (Some(first), Some(last)) = (r.loss_trajectory.first(), r.loss_trajectory.last()) {
            let _ = writeln!(out, "loss {first:.6} -> {last:.6}");
        }
        if !r.checks.is_empty() {
            out.push('\n');
            render_checks(&mut out, &r.checks);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{run_benchmark, Task};

    fn quick(task: Task) -> BenchConfig {
        BenchConfig { task, batch_size: 3, iters: 2, runs: 2, ..BenchConfig::default() }
    }

    #[test]
    fn report_survives_json_round_trip() {
        let config = quick(Task::Treelstm);
        let report = run_benchmark(&config).unwrap();
        let out = BenchOutput { config, report };
        let text = serde_json::to_string(&out).unwrap();
        assert_eq!(serde_json::from_str::<BenchOutput>(&text).unwrap(), out);
    }

    #[test]
    fn report_is_consistent() {
        let r = run_benchmark(&quick(Task::Bilstm)).unwrap();
        let p = r.phases_ms;
        for v in [p.construction_scheduling, p.forward, p.backward_graph, p.backward, p.update] {
            assert!(v >= 0.0);
        }
        assert!(p.sum() <= r.total_ms);
        assert_eq!(r.runs_ms.len(), 2);
        assert_eq!(r.total_ms, r.runs_ms.iter().cloned().fold(f64::INFINITY, f64::min));
        assert_eq!(r.loss_trajectory.len(), 2);
        assert!(r.manual_oracle_delta.is_none());
        assert!(r.passed());
    }

    #[test]
    fn identical_seeds_reproduce_losses() {
        let a = run_benchmark(&quick(Task::RnnReg)).unwrap();
        let b = run_benchmark(&quick(Task::RnnReg)).unwrap();
        assert_eq!(a.loss_trajectory, b.loss_trajectory);
        assert!(a.manual_oracle_delta.unwrap() <= 1e-9);
    }

    #[test]
    fn table_columns_align() {
        let rows = vec![vec!["a".to_string(), "1.5".to_string()], vec!["longer".to_string(), "22.25".to_string()]];
        let t = render_table(&["name", "value"], &rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()), "{t}");
        assert!(lines[3].starts_with("longer"));
        assert!(lines[2].ends_with("  1.5"));
    }
}
