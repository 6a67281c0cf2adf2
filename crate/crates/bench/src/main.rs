use std::path::PathBuf;
use std::process::ExitCode;

use autobatch::BatchMode;
use autobatch_bench::{
    compare_modes, first_step_artifacts, run_benchmark, BenchConfig, BenchError, BenchOutput, LengthRegime, Precision,
    Scale, Task,
};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
}

/// Trains a reference model under a batching mode and reports timings.
#[derive(Debug, Parser)]
#[command(name = "autobatch-bench", version)]
struct Cli {
    #[arg(long, value_enum, default_value_t = Task::Bilstm)]
    task: Task,
    /// none, depth or agenda.
    #[arg(long, default_value_t = BatchMode::Agenda)]
    mode: BatchMode,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    /// Training steps per timed run.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, value_enum, default_value_t = LengthRegime::Fixed)]
    lengths: LengthRegime,
    /// Timed runs; the fastest is reported.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    /// Write the first step's graph dump here.
    #[arg(long, value_name = "PATH")]
    emit_graph: Option<PathBuf>,
    /// Write the first step's execution plan here.
    #[arg(long, value_name = "PATH")]
    emit_plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    report: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Exit with status 1 if any acceptance threshold fails.
    #[arg(long)]
    check: bool,
    /// Run all three modes and report speedups; `--mode` is ignored.
    #[arg(long)]
    compare: bool,
}

impl Cli {
    fn config(&self) -> BenchConfig {
        BenchConfig {
            task: self.task,
            mode: self.mode,
            batch_size: self.batch_size as usize,
            iters: self.iters as usize,
            seed: self.seed,
            precision: self.precision,
            scale: self.scale,
            lengths: self.lengths,
            runs: self.runs as usize,
            eta: self.eta,
            ..BenchConfig::default()
        }
    }
}

fn write(path: &PathBuf, text: &str) -> Result<(), BenchError> {
    std::fs::write(path, text).map_err(|source| BenchError::Io { path: path.display().to_string(), source })
}

fn run(cli: &Cli) -> Result<bool, BenchError> {
    let cfg = cli.config();
    cfg.validate().map_err(BenchError::Config)?;
    if cli.emit_graph.is_some() || cli.emit_plan.is_some() {
        let (graph, plan) = first_step_artifacts(&cfg)?;
        if let Some(p) = &cli.emit_graph {
            write(p, &graph)?;
        }
        if let Some(p) = &cli.emit_plan {
            write(p, &plan)?;
        }
    }
    let (text, passed) = if cli.compare {
        let cmp = compare_modes(&cfg)?;
        let text = match cli.report {
            ReportFormat::Json => serde_json::to_string_pretty(&cmp).expect("report serialises") + "\n",
            ReportFormat::Table => cmp.to_table(),
        };
        (text, cmp.passed())
    } else {
        let report = run_benchmark(&cfg)?;
        let passed = report.passed();
        let output = BenchOutput { config: cfg, report };
        let text = match cli.report {
            ReportFormat::Json => serde_json::to_string_pretty(&output).expect("report serialises") + "\n",
            ReportFormat::Table => output.to_table(),
        };
        (text, passed)
    };
    match &cli.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(passed)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(passed) if cli.check && !passed => {
            eprintln!("acceptance thresholds failed");
            ExitCode::from(1)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e @ BenchError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
