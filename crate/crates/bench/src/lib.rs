//! Benchmark harness: trains the reference models under each batching mode
//! and reports per-phase timings, throughput and schedule statistics.

pub mod compare;
pub mod config;
pub mod report;
pub mod runner;

pub use compare::{compare_modes, Comparison, ModeRow, SPEEDUP_TARGET};
pub use config::{BenchConfig, LengthRegime, Precision, Scale, Task};
pub use report::{BenchOutput, Check, PhaseMillis, TimingReport};
pub use runner::{first_step_artifacts, run_benchmark, tolerance, OVERHEAD_LIMIT};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] autobatch::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
