use std::fs;
use std::path::Path;

use ewip_core::dynamics::SystemParams;
use ewip_core::environment::{EnvConfig, Environment, ReferenceTrajectory};
use serde::{Deserialize, Serialize};

use crate::config::{ControllerKind, ExperimentConfig};
use crate::controller::Policy;
use crate::error::BenchError;
use crate::metrics::{self, MetricsReport};
use crate::trace::{self, TraceRow};

/// One deterministic episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub trace: Vec<TraceRow>,
    /// Ended by falling rather than by reaching the end of the trajectory.
    pub failed: bool,
    /// Steps on which the controller repeated its previous input.
    pub fallbacks: usize,
}

impl Evaluation {
    pub fn metrics(&self) -> Result<MetricsReport, BenchError> {
        metrics::compute(&self.trace, self.failed)
    }
}

/// What `compare` needs to line runs up against each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub label: String,
    pub kind: ControllerKind,
    pub seed: u64,
    pub sample_time: f64,
    pub trajectory: ReferenceTrajectory,
    pub fallbacks: usize,
    pub metrics: MetricsReport,
}

/// Roll `policy` through one episode of `env_config`. A zero-length episode
/// yields an empty trace.
pub fn run_episode(
    policy: &mut dyn Policy,
    env_config: EnvConfig,
    params: SystemParams,
    seed: u64,
) -> Result<Evaluation, BenchError> {
    let mut env = Environment::new(env_config, params)?;
    if let Some(dim) = policy.obs_dim() {
        if dim != env.observation_width() {
            return Err(BenchError::validation(format!(
                "policy expects {dim} observations, env produces {}",
                env.observation_width()
            )));
        }
    }
    let mut out = Evaluation {
        trace: Vec::with_capacity(env.config().max_steps()),
        failed: false,
        fallbacks: 0,
    };
    if env.config().max_steps() == 0 {
        return Ok(out);
    }
    policy.reset();
    let mut obs = env.reset(seed);
    loop {
        let action = policy.act(&env, &obs)?;
        out.fallbacks += policy.fell_back() as usize;
        let step = env.step(action)?;
        out.trace.push(TraceRow::from_step(env.state(), &step));
        obs = step.observation;
        if step.done {
            out.failed = step.failed;
            return Ok(out);
        }
    }
}

/// Deterministic evaluation on the configured trajectory.
pub fn evaluate(
    config: &ExperimentConfig,
    policy: &mut dyn Policy,
    seed: u64,
) -> Result<Evaluation, BenchError> {
    run_episode(policy, config.evaluation_env(), config.plant, seed)
}

impl EvaluationReport {
    pub fn new(
        label: &str,
        config: &ExperimentConfig,
        seed: u64,
        evaluation: &Evaluation,
    ) -> Result<Self, BenchError> {
        let env = config.evaluation_env();
        Ok(Self {
            label: label.to_owned(),
            kind: config.kind,
            seed,
            sample_time: env.sample_time,
            trajectory: env.trajectory(&config.plant),
            fallbacks: evaluation.fallbacks,
            metrics: evaluation.metrics()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(|e| {
            BenchError::validation(format!("cannot read report {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| BenchError::validation(format!("{}: {e}", path.display())))
    }
}

pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";

/// Write `trace.csv`, then `report.json`. The trace is kept even when the
/// metrics cannot be computed.
pub fn write_run(
    dir: &Path,
    label: &str,
    config: &ExperimentConfig,
    seed: u64,
    evaluation: &Evaluation,
) -> Result<EvaluationReport, BenchError> {
    fs::create_dir_all(dir)?;
    trace::save(&evaluation.trace, &dir.join(TRACE_FILE))?;
    let report = EvaluationReport::new(label, config, seed, evaluation)?;
    report.save(&dir.join(REPORT_FILE))?;
    Ok(report)
}
