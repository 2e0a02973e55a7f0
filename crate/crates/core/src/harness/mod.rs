//! Seeded experiment harness: configuration, training loop, sweeps and
//! CSV reporting.

pub mod config;
pub mod metrics;
pub mod report;
pub mod sweep;
pub mod training;

pub use config::{Algo, EnvConfig, ExperimentConfig, GridworldParams};
pub use metrics::{read_metrics, violation_fraction, MetricsRow, CSV_HEADER};
pub use training::{run_training, safe_initialize, EnvInstance, Learner, TrainingRun};
pub use report::{summarize, RunSummary};
pub use sweep::{sweep_beta, sweep_samples, BetaSweep, CellResult, SampleSweep};
