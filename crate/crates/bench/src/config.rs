use std::fmt;

use autobatch::BatchMode;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    RnnReg,
    Bilstm,
    BilstmChar,
    Treelstm,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::RnnReg, Task::Bilstm, Task::BilstmChar, Task::Treelstm];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Sequence lengths (leaf counts for trees): all 40, or uniform in 4..=40.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LengthRegime {
    Fixed,
    Variable,
}

macro_rules! display_via_value_enum {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
            }
        }
    )*};
}
display_via_value_enum!(Task, Precision, Scale, LengthRegime);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub task: Task,
    pub mode: BatchMode,
    pub batch_size: usize,
    /// Training steps per timed run.
    pub iters: usize,
    pub seed: u64,
    pub precision: Precision,
    pub scale: Scale,
    pub lengths: LengthRegime,
    /// Timed runs; the fastest is reported.
    pub runs: usize,
    pub warmup_runs: usize,
    pub eta: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            task: Task::Bilstm,
            mode: BatchMode::Agenda,
            batch_size: 64,
            iters: 1,
            seed: 1,
            precision: Precision::F64,
            scale: Scale::Desk,
            lengths: LengthRegime::Fixed,
            runs: 3,
            warmup_runs: 1,
            eta: 1e-3,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        if self.iters == 0 {
            return Err("iters must be at least 1".into());
        }
        if self.runs == 0 {
            return Err("runs must be at least 1".into());
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(format!("learning rate {} must be finite and non-negative", self.eta));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_matches_serialized_names() {
        for task in Task::ALL {
            assert_eq!(serde_json::to_string(&task).unwrap(), format!("\"{task}\""));
        }
        assert_eq!(Task::RnnReg.to_string(), "rnn-reg");
        assert_eq!(Task::BilstmChar.to_string(), "bilstm-char");
        assert_eq!(Precision::F32.to_string(), "f32");
        assert_eq!(serde_json::to_string(&Scale::Paper).unwrap(), "\"paper\"");
    }

    #[test]
    fn validation_rejects_degenerate_runs() {
        assert!(BenchConfig::default().validate().is_ok());
        for bad in [
            BenchConfig { batch_size: 0, ..BenchConfig::default() },
            BenchConfig { iters: 0, ..BenchConfig::default() },
            BenchConfig { runs: 0, ..BenchConfig::default() },
            BenchConfig { eta: -0.1, ..BenchConfig::default() },
            BenchConfig { eta: f64::NAN, ..BenchConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn defaults_follow_the_benchmark_setup() {
        let c = BenchConfig::default();
        assert_eq!((c.batch_size, c.runs, c.warmup_runs), (64, 3, 1));
        assert_eq!(c.mode, BatchMode::Agenda);
    }
}
