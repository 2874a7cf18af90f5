//! Training runs with periodic deterministic evaluation.
//!
//! Output directory layout: `train_log.csv` (one row per episode or update),
//! `eval_log.csv`, `best.json` (checkpoint with the highest evaluation
//! return), `final.json` and `summary.json`.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::ops::ControlFlow;
use std::path::Path;

use ewip_core::ddpg::{self, DdpgAgent};
use ewip_core::environment::Environment;
use ewip_core::ppo::{self, PpoAgent};
use serde::{Deserialize, Serialize};

use crate::config::{ControllerKind, ExperimentConfig};
use crate::controller::Policy;
use crate::error::BenchError;
use crate::evaluate::evaluate;

/// Episodes in the trailing window of the mean-max-reward statistic.
pub const REWARD_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalLogRow {
    /// Episodes (DDPG) or updates (PPO) completed when evaluated.
    pub index: usize,
    /// Training episodes completed when evaluated.
    pub episodes: usize,
    pub episode_return: f64,
    pub final_error: f64,
    pub max_theta: f64,
    pub failed: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub kind: ControllerKind,
    pub seed: u64,
    /// Episodes (DDPG) or updates (PPO) run.
    pub iterations: usize,
    pub episodes: usize,
    pub evaluations: usize,
    pub best_eval_return: Option<f64>,
    pub best_eval_index: Option<usize>,
    /// Index of the first successful evaluation, in training iterations.
    pub first_success: Option<usize>,
    /// Training episodes completed at the first successful evaluation.
    pub first_success_episode: Option<usize>,
    /// Largest trailing mean of training returns over `REWARD_WINDOW` entries.
    pub mean_max_reward: Option<f64>,
}

/// Max over time of the trailing `window`-entry mean. Shorter prefixes
/// average what is there.
pub fn mean_max_reward(returns: &[f64], window: usize) -> f64 {
    let mut q = VecDeque::with_capacity(window);
    let mut sum = 0.0;
    let mut best = f64::NEG_INFINITY;
    for &r in returns {
        q.push_back(r);
        sum += r;
        if q.len() > window {
            sum -= q.pop_front().unwrap_or(0.0);
        }
        best = best.max(sum / q.len() as f64);
    }
    best
}

struct Tracker<'a> {
    config: &'a ExperimentConfig,
    evals: Vec<EvalLogRow>,
    best: Option<(f64, usize, String)>,
    first_success: Option<(usize, usize)>,
    error: Option<BenchError>,
    on_eval: &'a mut dyn FnMut(&EvalLogRow),
}

impl Tracker<'_> {
    /// Evaluate, remember the best checkpoint, decide whether to stop.
    fn evaluate(
        &mut self,
        policy: &mut dyn Policy,
        checkpoint: impl FnOnce() -> Result<String, BenchError>,
        index: usize,
        episodes: usize,
    ) -> Result<ControlFlow<()>, BenchError> {
        let ev = evaluate(self.config, policy, self.config.seed)?;
        let m = ev.metrics()?;
        let success = !m.failed && m.final_error <= self.config.training.success_tolerance;
        let row = EvalLogRow {
            index,
            episodes,
            episode_return: m.episode_return,
            final_error: m.final_error,
            max_theta: m.max_theta,
            failed: m.failed,
            success,
        };
        (self.on_eval)(&row);
        self.evals.push(row);
        if self.best.as_ref().is_none_or(|(r, _, _)| m.episode_return > *r) {
            self.best = Some((m.episode_return, index, checkpoint()?));
        }
        if success && self.first_success.is_none() {
            self.first_success = Some((index, episodes));
        }
        Ok(if success && self.config.training.stop_on_success {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    }

    fn due(&self, done: usize, budget: usize) -> bool {
        done.is_multiple_of(self.config.training.eval_every) || done == budget
    }

    fn fail(&mut self, e: BenchError) -> ControlFlow<()> {
        self.error = Some(e);
        ControlFlow::Break(())
    }
}

/// Train the configured RL controller, writing logs and checkpoints to `out`.
/// `on_eval` sees every evaluation row as it is produced.
pub fn run_training(
    config: &ExperimentConfig,
    out: &Path,
    on_eval: &mut dyn FnMut(&EvalLogRow),
) -> Result<TrainingSummary, BenchError> {
    if !config.kind.is_rl() {
        return Err(BenchError::validation(format!(
            "kind {} is not trainable",
            config.kind
        )));
    }
    config.validate()?;
    let mut env = Environment::new(config.env.clone(), config.plant)?;
    let width = env.observation_width();
    fs::create_dir_all(out)?;
    let mut train_log = csv::Writer::from_writer(File::create(out.join("train_log.csv"))?);
    let mut tracker = Tracker {
        config,
        evals: Vec::new(),
        best: None,
        first_success: None,
        error: None,
        on_eval,
    };
    let mut returns = Vec::new();
    let (iterations, episodes, final_checkpoint) = if config.kind.is_ddpg() {
        let budget = config.training.episodes;
        let mut agent = DdpgAgent::new(width, &config.plant, config.ddpg.clone(), config.seed)?;
        let log = ddpg::train(&mut env, &mut agent, budget, config.seed, |agent, row| {
            if let Err(e) = train_log.serialize(row) {
                return tracker.fail(e.into());
            }
            let done = row.episode + 1;
            if !tracker.due(done, budget) {
                return ControlFlow::Continue(());
            }
            let ckpt = || Ok(agent.to_checkpoint()?);
            tracker
                .evaluate(&mut &*agent, ckpt, done, done)
                .unwrap_or_else(|e| tracker.fail(e))
        })?;
        returns.extend(log.iter().map(|r| r.total_reward));
        (log.len(), log.len(), agent.to_checkpoint()?)
    } else {
        let budget = config.training.updates;
        let mut agent = PpoAgent::new(width, &config.plant, config.ppo.clone(), config.seed)?;
        let mut episodes = 0;
        let log = ppo::train(&mut env, &mut agent, budget, config.seed, |agent, row| {
            if let Err(e) = train_log.serialize(row) {
                return tracker.fail(e.into());
            }
            episodes += row.episodes;
            let done = row.update_index + 1;
            if !tracker.due(done, budget) {
                return ControlFlow::Continue(());
            }
            let ckpt = || Ok(agent.to_checkpoint()?);
            tracker
                .evaluate(&mut &*agent, ckpt, done, episodes)
                .unwrap_or_else(|e| tracker.fail(e))
        })?;
        returns.extend(log.iter().map(|r| r.mean_episode_reward));
        (log.len(), episodes, agent.to_checkpoint()?)
    };
    train_log.flush()?;
    if let Some(e) = tracker.error {
        return Err(e);
    }

    let mut eval_log = csv::Writer::from_writer(File::create(out.join("eval_log.csv"))?);
    for row in &tracker.evals {
        eval_log.serialize(row)?;
    }
    eval_log.flush()?;
    fs::write(out.join("final.json"), &final_checkpoint)?;
    if let Some((_, _, ckpt)) = &tracker.best {
        fs::write(out.join("best.json"), ckpt)?;
    }
    let summary = TrainingSummary {
        kind: config.kind,
        seed: config.seed,
        iterations,
        episodes,
        evaluations: tracker.evals.len(),
        best_eval_return: tracker.best.as_ref().map(|b| b.0),
        best_eval_index: tracker.best.as_ref().map(|b| b.1),
        first_success: tracker.first_success.map(|s| s.0),
        first_success_episode: tracker.first_success.map(|s| s.1),
        mean_max_reward: (!returns.is_empty()).then(|| mean_max_reward(&returns, REWARD_WINDOW)),
    };
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_mean_max() {
        assert_eq!(mean_max_reward(&[1.0, 3.0, 2.0], 2), 2.5);
        assert_eq!(mean_max_reward(&[5.0, 0.0, 0.0], 2), 5.0);
        assert_eq!(mean_max_reward(&[-1.0, -3.0], 100), -1.0);
        assert_eq!(mean_max_reward(&[], 100), f64::NEG_INFINITY);
    }
}
