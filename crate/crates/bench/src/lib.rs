//! Experiment harness: configuration, training runs, deterministic
//! evaluation on the reference trajectory, metrics, comparisons and
//! effort-response sweeps.

pub mod compare;
pub mod config;
pub mod controller;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod sweep;
pub mod trace;
pub mod training;

pub use config::{ControllerKind, ExperimentConfig};
pub use controller::{Controller, Policy};
pub use error::BenchError;
pub use evaluate::{evaluate, run_episode, Evaluation, EvaluationReport};
pub use metrics::MetricsReport;
pub use trace::TraceRow;
