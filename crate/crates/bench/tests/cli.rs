use std::path::PathBuf;
use std::process::{Command, Output};

use autobatch::BatchMode;
use autobatch_bench::{BenchOutput, Comparison, Task};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autobatch-bench")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn temp_path(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("autobatch-bench-{}-{name}", std::process::id()))
}

const QUICK: [&str; 6] = ["--batch-size", "4", "--runs", "1", "--seed", "3"];

#[test]
fn table_report_lists_every_phase() {
    let out = bench(&[&["--task", "rnn-reg"], &QUICK[..]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for phase in ["construction+scheduling", "forward", "backward graph", "backward", "update", "instances/sec"] {
        assert!(text.contains(phase), "missing {phase}:\n{text}");
    }
    assert!(text.contains("manual-batch oracle"));
}

#[test]
fn json_report_round_trips() {
    let path = temp_path("report.json");
    let out = bench(&[&["--task", "bilstm-char", "--report", "json", "--out", path.to_str().unwrap()], &QUICK[..]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty(), "--out redirects the report");
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed: BenchOutput = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.config.task, Task::BilstmChar);
    assert_eq!(parsed.config.batch_size, 4);
    let again: BenchOutput = serde_json::from_str(&serde_json::to_string(&parsed).unwrap()).unwrap();
    assert_eq!(again, parsed);
    let r = &parsed.report;
    assert!(r.phases_ms.sum() <= r.total_ms);
    assert_eq!(r.runs_ms.len(), 1);
    assert!(r.instances_per_sec > 0.0);
    std::fs::remove_file(path).unwrap();
}

#[test]
fn compare_prints_three_modes_with_ratios() {
    let out = bench(&[&["--compare", "--task", "treelstm", "--check"], &QUICK[..]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("vs none"));
    let rows: Vec<&str> =
        text.lines().filter(|l| ["none ", "depth ", "agenda "].iter().any(|m| l.starts_with(m))).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows[0].contains("1.00x"));
}

#[test]
fn compare_json_has_a_row_per_mode() {
    let out = bench(&[&["--compare", "--task", "rnn-reg", "--report", "json", "--precision", "f32"], &QUICK[..]].concat());
    assert!(out.status.success());
    let cmp: Comparison = serde_json::from_str(&stdout(&out)).unwrap();
    let modes: Vec<BatchMode> = cmp.rows.iter().map(|r| r.mode).collect();
    assert_eq!(modes, BatchMode::ALL);
    assert_eq!(cmp.row(BatchMode::None).speedup, 1.0);
    assert!(cmp.checks.iter().any(|c| c.name.ends_with("manual-batch oracle") && c.passed));
    assert!(cmp.passed());
}

#[test]
fn single_tree_batches_within_the_instance() {
    let out = bench(&["--compare", "--task", "treelstm", "--batch-size", "1", "--runs", "1", "--report", "json"]);
    let cmp: Comparison = serde_json::from_str(&stdout(&out)).unwrap();
    let check = cmp.checks.iter().find(|c| c.name == "agenda: within-instance batching").unwrap();
    assert!(check.passed, "{}", check.detail);
    assert!(cmp.row(BatchMode::Agenda).report.max_group_size >= 2);
}

#[test]
fn emits_graph_and_plan() {
    let (graph, plan) = (temp_path("graph.tsv"), temp_path("plan.tsv"));
    let out = bench(&[
        &["--task", "bilstm", "--emit-graph", graph.to_str().unwrap(), "--emit-plan", plan.to_str().unwrap()],
        &QUICK[..],
    ]
    .concat());
    assert!(out.status.success());
    let graph_text = std::fs::read_to_string(&graph).unwrap();
    assert!(graph_text.lines().count() > 10);
    assert!(graph_text.lines().all(|l| l.split('\t').count() == 6), "six tab-separated fields");
    let plan_text = std::fs::read_to_string(&plan).unwrap();
    assert!(!plan_text.is_empty());
    let planned: usize = plan_text.lines().map(|l| l.split('\t').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    let leaves = graph_text.lines().filter(|l| matches!(l.split('\t').nth(1), Some("input_const" | "parameter"))).count();
    assert_eq!(planned + leaves, graph_text.lines().count(), "every non-leaf node is planned once");
    std::fs::remove_file(graph).unwrap();
    std::fs::remove_file(plan).unwrap();
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["--mode", "bogus"][..],
        &["--task", "parser"],
        &["--batch-size", "0"],
        &["--iters", "0"],
        &["--precision", "f16"],
        &["--report", "xml"],
        &["--eta=-1"],
        &["--no-such-flag"],
    ] {
        let out = bench(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn failed_thresholds_exit_with_one_under_check() {
    // A single sequence has nothing to batch across, so the speedup target fails.
    let args = ["--compare", "--task", "rnn-reg", "--scale", "paper", "--batch-size", "1", "--runs", "1"];
    let out = bench(&[&args[..], &["--check"]].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("[FAIL] agenda throughput"));
    assert_eq!(bench(&args).status.code(), Some(0), "without --check failures only print");
}
