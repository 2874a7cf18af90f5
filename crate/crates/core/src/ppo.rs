//! Proximal policy optimization with a clipped surrogate and finite-horizon
//! advantages.
//!
//! The policy is a diagonal Gaussian: a tanh-bounded mean network plus one
//! learned log standard deviation per action, independent of the state.
//! Sampled actions are stored unclamped so their log-probabilities stay
//! consistent; the environment saturates them at the actuator limits.

use std::f64::consts::PI;
use std::ops::ControlFlow;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::dynamics::{ControlInput, SystemParams};
use crate::environment::{EnvError, Environment};
use crate::neural::{Adam, AdamConfig, Gradients, Mlp, NeuralError, OutputKind, RunningNorm};

pub const CHECKPOINT_KIND: &str = "ewip-ppo";

const ACTION_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("update {update} diverged: non-finite {what}")]
    Diverged { update: usize, what: &'static str },
    #[error("observation width {got} does not match agent width {expected}")]
    ObservationWidth { expected: usize, got: usize },
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("no rollout data to learn from")]
    EmptyRollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    /// Surrogate clip range epsilon.
    pub clip: f64,
    pub epochs: usize,
    /// Environment steps gathered per update.
    pub horizon: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub actor: AdamConfig,
    pub critic: AdamConfig,
    pub hidden: Vec<usize>,
    /// Initial policy std as a fraction of each actuator limit.
    pub init_std: f64,
    pub normalize_advantages: bool,
    pub normalize_observations: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        let adam = AdamConfig {
            learning_rate: 1e-4,
            clip: Some(10.0),
            ..AdamConfig::default()
        };
        Self {
            gamma: 0.99,
            clip: 0.2,
            epochs: 10,
            horizon: 1000,
            minibatch: 128,
            entropy_coef: 0.01,
            value_coef: 0.5,
            actor: adam,
            critic: adam,
            hidden: vec![128, 128],
            init_std: 0.2,
            normalize_advantages: true,
            normalize_observations: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.into()));
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma outside [0, 1]");
        }
        // epsilon = 0 is admitted as the frozen-policy limit
        if !(self.clip >= 0.0 && self.clip < 1.0) {
            return bad("clip epsilon outside [0, 1)");
        }
        if self.epochs == 0 || self.horizon == 0 || self.minibatch == 0 {
            return bad("epochs, horizon and minibatch must be positive");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        if self.entropy_coef < 0.0 || self.value_coef <= 0.0 {
            return bad("need entropy_coef >= 0 and value_coef > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    /// Raw observation; normalization is applied by the agent.
    pub s: Vec<f64>,
    /// Sampled action before saturation.
    pub a: ControlInput,
    pub log_prob: f64,
    pub r: f64,
    pub v: f64,
    /// Step ended in failure: nothing to bootstrap past it.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    /// `V(s_T)` for the state after the last step; ignored if that step is terminal.
    pub bootstrap: f64,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.r).sum()
    }
}

/// `A_t = r_t + g r_{t+1} + ... + g^{T-1-t} r_{T-1} + g^{T-t} V(s_T) - V(s_t)`,
/// by backward recursion. A terminal step cuts the return there.
pub fn advantages(rollout: &Rollout, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rollout.steps.len()];
    let mut ret = rollout.bootstrap;
    for (t, step) in rollout.steps.iter().enumerate().rev() {
        if step.terminal {
            ret = 0.0;
        }
        ret = step.r + gamma * ret;
        out[t] = ret - step.v;
    }
    out
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_density(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Ratios this close to a band edge count as on it. Batched and single-sample
/// forward passes round differently, so an unchanged policy can give a ratio
/// a few ulps away from 1.
pub const RATIO_TIE: f64 = 1e-12;

/// Clipped surrogate term for one sample and its derivative in the ratio.
///
/// On a band edge the clipped branch is taken, so with epsilon = 0 the
/// gradient vanishes at ratio 1.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let (u, c) = (ratio * advantage, clipped * advantage);
    let inside = ratio > 1.0 - eps + RATIO_TIE && ratio < 1.0 + eps - RATIO_TIE;
    if inside || u < c - RATIO_TIE * advantage.abs() {
        (u, advantage)
    } else {
        (c, 0.0)
    }
}

/// One row of an update batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub old_log_prob: f64,
    pub advantage: f64,
    /// Return target for the critic, `A_t + V(s_t)` before normalization.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    /// Mean clipped surrogate, to be maximized.
    pub objective: f64,
    pub mean_ratio: f64,
    /// Fraction of samples with the ratio outside the band.
    pub clip_fraction: f64,
    /// Ascent gradient for the mean network.
    pub mean_grads: Gradients,
    /// Ascent gradient for the log standard deviations.
    pub log_std_grads: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean ratio on the first minibatch of the first epoch.
    pub first_ratio: f64,
    pub first_clip_fraction: f64,
    pub minibatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoAgent {
    config: PpoConfig,
    obs_dim: usize,
    limits: [f64; ACTION_DIM],
    /// Policy mean network.
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    /// Covers the actor parameters followed by `log_std`.
    actor_opt: Adam,
    critic_opt: Adam,
    pub normalizer: RunningNorm,
    rng: ChaCha8Rng,
    updates_done: usize,
}

impl PpoAgent {
    pub fn new(
        obs_dim: usize,
        params: &SystemParams,
        config: PpoConfig,
        seed: u64,
    ) -> Result<Self, PpoError> {
        config.validate()?;
        let limits = [params.tau_max, params.f_max];
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(ACTION_DIM);
        let mut critic_sizes = vec![obs_dim];
        critic_sizes.extend(&config.hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(
            &actor_sizes,
            OutputKind::TanhScaled(limits.to_vec()),
            seeds.random(),
        )?;
        let critic = Mlp::new(&critic_sizes, OutputKind::Linear, seeds.random())?;
        let mut mask = actor.weight_mask();
        mask.extend([false; ACTION_DIM]);
        Ok(Self {
            obs_dim,
            limits,
            log_std: limits.iter().map(|l| (config.init_std * l).ln()).collect(),
            actor_opt: Adam::new(config.actor, mask),
            critic_opt: Adam::for_net(config.critic, &critic),
            actor,
            critic,
            normalizer: RunningNorm::new(obs_dim, config.normalize_observations),
            rng: ChaCha8Rng::seed_from_u64(seeds.random()),
            updates_done: 0,
            config,
        })
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    /// Replace the clip range, e.g. for ablations.
    pub fn set_clip(&mut self, eps: f64) -> Result<(), PpoError> {
        let config = PpoConfig {
            clip: eps,
            ..self.config.clone()
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn updates_done(&self) -> usize {
        self.updates_done
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), PpoError> {
        if obs.len() != self.obs_dim {
            return Err(PpoError::ObservationWidth {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    /// Policy mean, used for evaluation.
    pub fn act(&self, obs: &[f64]) -> Result<ControlInput, PpoError> {
        self.check_obs(obs)?;
        let y = self.actor.forward(&self.normalizer.normalize(obs))?;
        Ok(ControlInput::new(y[0], y[1]))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, PpoError> {
        self.check_obs(obs)?;
        Ok(self.critic.forward(&self.normalizer.normalize(obs))?[0])
    }

    pub fn log_prob(&self, obs: &[f64], action: &ControlInput) -> Result<f64, PpoError> {
        let mean = self.act(obs)?.to_array();
        Ok(gaussian_log_density(&action.to_array(), &mean, &self.log_std))
    }

    /// Draw an unclamped action from the policy, with its log-probability.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        rng: &mut R,
    ) -> Result<(ControlInput, f64), PpoError> {
        let mean = self.act(obs)?.to_array();
        let mut a = [0.0; ACTION_DIM];
        for k in 0..ACTION_DIM {
            let n: f64 = StandardNormal.sample(rng);
            a[k] = mean[k] + self.log_std[k].exp() * n;
        }
        Ok((
            ControlInput::from_slice(&a),
            gaussian_log_density(&a, &mean, &self.log_std),
        ))
    }

    pub fn sample(&mut self, obs: &[f64]) -> Result<(ControlInput, f64), PpoError> {
        let mut rng = self.rng.clone();
        let out = self.sample_with(obs, &mut rng);
        self.rng = rng;
        out
    }

    /// `exp(log pi(a|s) - log pi_old(a|s))` under the current parameters.
    pub fn probability_ratio(&self, step: &RolloutStep) -> Result<f64, PpoError> {
        Ok((self.log_prob(&step.s, &step.a)? - step.log_prob).exp())
    }

    /// Entropy of the Gaussian policy, summed over action dimensions.
    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|ls| ls + 0.5 * (1.0 + (2.0 * PI).ln()))
            .sum()
    }

    pub fn advantages(&self, rollout: &Rollout) -> Vec<f64> {
        advantages(rollout, self.config.gamma)
    }

    /// Flatten rollouts into samples with (optionally normalized) advantages.
    pub fn prepare(&self, rollouts: &[Rollout]) -> Vec<Sample> {
        let mut samples = Vec::new();
        for rollout in rollouts {
            for (step, adv) in rollout.steps.iter().zip(self.advantages(rollout)) {
                samples.push(Sample {
                    obs: step.s.clone(),
                    action: step.a.to_array(),
                    old_log_prob: step.log_prob,
                    advantage: adv,
                    target: adv + step.v,
                });
            }
        }
        if self.config.normalize_advantages && samples.len() > 1 {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
            let var = samples
                .iter()
                .map(|s| (s.advantage - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.sqrt().max(1e-8);
            for s in &mut samples {
                s.advantage = (s.advantage - mean) / std;
            }
        }
        samples
    }

    fn obs_matrix(&self, batch: &[&Sample]) -> DMatrix<f64> {
        self.normalizer
            .normalize_batch(batch.iter().map(|s| s.obs.as_slice()))
    }

    /// Mean clipped surrogate over `batch` and its ascent gradients.
    pub fn clipped_surrogate(&self, batch: &[&Sample], eps: f64) -> Result<SurrogateEval, PpoError> {
        let m = batch.len() as f64;
        let pass = self.actor.forward_recorded(&self.obs_matrix(batch))?;
        let mean = pass.output();
        let std: Vec<f64> = self.std();
        let mut seed = DMatrix::zeros(ACTION_DIM, batch.len());
        let mut log_std_grads = vec![0.0; ACTION_DIM];
        let (mut objective, mut ratio_sum, mut clipped) = (0.0, 0.0, 0usize);
        for (j, s) in batch.iter().enumerate() {
            let mu: Vec<f64> = (0..ACTION_DIM).map(|k| mean[(k, j)]).collect();
            let ratio = (gaussian_log_density(&s.action, &mu, &self.log_std) - s.old_log_prob).exp();
            let (value, dratio) = surrogate_term(ratio, s.advantage, eps);
            objective += value / m;
            ratio_sum += ratio;
            if (ratio - 1.0).abs() > eps + RATIO_TIE {
                clipped += 1;
            }
            // d ratio = ratio * d log pi
            let w = dratio * ratio / m;
            for k in 0..ACTION_DIM {
                let z = (s.action[k] - mu[k]) / std[k];
                seed[(k, j)] = w * z / std[k];
                log_std_grads[k] += w * (z * z - 1.0);
            }
        }
        let (mean_grads, _) = self.actor.backward(&pass, &seed)?;
        Ok(SurrogateEval {
            objective,
            mean_ratio: ratio_sum / m,
            clip_fraction: clipped as f64 / m,
            mean_grads,
            log_std_grads,
        })
    }

    /// Mean squared error of `V(s)` against the sample targets.
    pub fn value_loss(&self, batch: &[&Sample]) -> Result<(f64, Gradients), PpoError> {
        let m = batch.len() as f64;
        let pass = self.critic.forward_recorded(&self.obs_matrix(batch))?;
        let v = pass.output();
        let mut loss = 0.0;
        let mut seed = DMatrix::zeros(1, batch.len());
        for (j, s) in batch.iter().enumerate() {
            let r = v[(0, j)] - s.target;
            loss += r * r / m;
            seed[(0, j)] = 2.0 * r / m;
        }
        let (grads, _) = self.critic.backward(&pass, &seed)?;
        Ok((loss, grads))
    }

    /// Epochs of shuffled minibatch steps on the clipped surrogate plus
    /// entropy bonus (actor) and the value loss (critic).
    ///
    /// Works on a copy and commits only if every step stayed finite, so on
    /// error the agent is left as it was.
    pub fn update(&mut self, rollouts: &[Rollout]) -> Result<UpdateStats, PpoError> {
        let samples = self.prepare(rollouts);
        if samples.is_empty() {
            return Err(PpoError::EmptyRollout);
        }
        let mut next = self.clone();
        let stats = next.update_in_place(&samples)?;
        *self = next;
        Ok(stats)
    }

    fn update_in_place(&mut self, samples: &[Sample]) -> Result<UpdateStats, PpoError> {
        let update = self.updates_done;
        let diverged = |what| PpoError::Diverged { update, what };
        let eps = self.config.clip;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut stats = UpdateStats::default();
        let mut actor_flat = Vec::with_capacity(self.actor.num_params() + ACTION_DIM);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.minibatch) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let eval = self.clipped_surrogate(&batch, eps)?;
                let (vloss, vgrads) = self.value_loss(&batch)?;
                if !eval.objective.is_finite() {
                    return Err(diverged("surrogate"));
                }
                if !vloss.is_finite() {
                    return Err(diverged("value loss"));
                }
                if stats.minibatches == 0 {
                    stats.first_ratio = eval.mean_ratio;
                    stats.first_clip_fraction = eval.clip_fraction;
                }
                stats.minibatches += 1;
                stats.mean_ratio += eval.mean_ratio;
                stats.clip_fraction += eval.clip_fraction;
                stats.surrogate += eval.objective;
                stats.value_loss += vloss;

                // descend on -(L + c_ent H); dH/dlog_std = 1
                let mut grads: Vec<f64> = eval.mean_grads.0.iter().map(|g| -g).collect();
                grads.extend(
                    eval.log_std_grads
                        .iter()
                        .map(|g| -(g + self.config.entropy_coef)),
                );
                actor_flat.clear();
                actor_flat.extend_from_slice(self.actor.params());
                actor_flat.extend_from_slice(&self.log_std);
                self.actor_opt
                    .update(&mut actor_flat, &grads)
                    .map_err(|_| diverged("actor gradient"))?;
                let n = self.actor.num_params();
                self.actor.params_mut().copy_from_slice(&actor_flat[..n]);
                self.log_std.copy_from_slice(&actor_flat[n..]);

                let mut vgrads = vgrads;
                vgrads.scale(self.config.value_coef);
                self.critic_opt
                    .update_net(&mut self.critic, &vgrads)
                    .map_err(|_| diverged("critic gradient"))?;
            }
        }
        let k = stats.minibatches as f64;
        stats.mean_ratio /= k;
        stats.clip_fraction /= k;
        stats.surrogate /= k;
        stats.value_loss /= k;
        stats.entropy = self.entropy();
        self.updates_done += 1;
        Ok(stats)
    }

    pub fn to_checkpoint(&self) -> Result<String, PpoError> {
        Ok(checkpoint::to_string(CHECKPOINT_KIND, self)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PpoError> {
        Ok(checkpoint::from_str(CHECKPOINT_KIND, text)?)
    }
}

/// Run whole episodes with the stochastic policy until at least
/// `min_steps` environment steps are gathered. Episode `k` of the call
/// resets with seed `seed + k`. Observation statistics stay frozen here.
pub fn collect_rollouts(
    env: &mut Environment,
    agent: &mut PpoAgent,
    min_steps: usize,
    seed: u64,
) -> Result<Vec<Rollout>, PpoError> {
    if env.observation_width() != agent.obs_dim {
        return Err(PpoError::ObservationWidth {
            expected: agent.obs_dim,
            got: env.observation_width(),
        });
    }
    let mut rollouts = Vec::new();
    let mut total = 0;
    while total < min_steps {
        let mut obs = env.reset(seed.wrapping_add(rollouts.len() as u64));
        let mut steps = Vec::new();
        let bootstrap = loop {
            let (action, log_prob) = agent.sample(obs.as_slice())?;
            let v = agent.value(obs.as_slice())?;
            let result = env.step(action)?;
            steps.push(RolloutStep {
                s: obs.0,
                a: action,
                log_prob,
                r: result.reward.total,
                v,
                terminal: result.failed,
            });
            obs = result.observation;
            if result.done {
                break if result.failed {
                    0.0
                } else {
                    agent.value(obs.as_slice())?
                };
            }
        };
        total += steps.len();
        rollouts.push(Rollout { steps, bootstrap });
    }
    Ok(rollouts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoLogRow {
    pub update_index: usize,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_episode_reward: f64,
    pub episodes: usize,
    pub steps: usize,
}

/// Alternate rollout collection and updates. Update `k` collects with seeds
/// derived from `seed` and `k`; the callback may stop training early.
pub fn train(
    env: &mut Environment,
    agent: &mut PpoAgent,
    updates: usize,
    seed: u64,
    mut on_update: impl FnMut(&PpoAgent, &PpoLogRow) -> ControlFlow<()>,
) -> Result<Vec<PpoLogRow>, PpoError> {
    let mut log = Vec::with_capacity(updates);
    let mut episode_seed = seed;
    for update_index in 0..updates {
        let rollouts = collect_rollouts(env, agent, agent.config.horizon, episode_seed)?;
        episode_seed = episode_seed.wrapping_add(rollouts.len() as u64);
        let stats = agent.update(&rollouts)?;
        for step in rollouts.iter().flat_map(|r| &r.steps) {
            agent.normalizer.update(&step.s);
        }
        let episodes = rollouts.len();
        let row = PpoLogRow {
            update_index,
            mean_ratio: stats.mean_ratio,
            clip_fraction: stats.clip_fraction,
            surrogate: stats.surrogate,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            mean_episode_reward: rollouts.iter().map(Rollout::total_reward).sum::<f64>()
                / episodes as f64,
            episodes,
            steps: rollouts.iter().map(|r| r.steps.len()).sum(),
        };
        log.push(row);
        if on_update(agent, &row).is_break() {
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(r: f64, v: f64, terminal: bool) -> RolloutStep {
        RolloutStep {
            s: vec![0.0; 3],
            a: ControlInput::new(0.0, 0.0),
            log_prob: 0.0,
            r,
            v,
            terminal,
        }
    }

    #[test]
    fn advantage_examples() {
        let ones = Rollout {
            steps: (0..3).map(|_| step(1.0, 0.0, false)).collect(),
            bootstrap: 0.0,
        };
        assert_eq!(advantages(&ones, 1.0)[0], 3.0);

        let c = 2.5;
        let flat = Rollout {
            steps: (0..4).map(|_| step(0.0, c, false)).collect(),
            bootstrap: c,
        };
        assert!(advantages(&flat, 1.0).iter().all(|&a| a == 0.0));

        let single = Rollout {
            steps: vec![step(0.7, 0.3, false)],
            bootstrap: 1.1,
        };
        assert!((advantages(&single, 0.9)[0] - (-0.3 + 0.7 + 0.9 * 1.1)).abs() < 1e-15);
    }

    #[test]
    fn terminal_drops_bootstrap() {
        let r = Rollout {
            steps: vec![step(1.0, 0.0, false), step(2.0, 0.5, true)],
            bootstrap: 100.0,
        };
        let a = advantages(&r, 0.5);
        assert_eq!(a[1], 2.0 - 0.5);
        assert_eq!(a[0], 1.0 + 0.5 * 2.0);
    }

    #[test]
    fn surrogate_case_table() {
        let close = |(v, g): (f64, f64), (ev, eg): (f64, f64)| {
            assert!((v - ev).abs() < 1e-15 && g == eg, "{v},{g} vs {ev},{eg}")
        };
        // A > 0 above the band: clipped, no gradient
        close(surrogate_term(2.0, 1.0, 0.2), (1.2, 0.0));
        // A > 0 below the band: unclipped product is the smaller
        close(surrogate_term(0.5, 1.0, 0.2), (0.5, 1.0));
        // A < 0 above the band: unclipped product is the smaller
        close(surrogate_term(2.0, -1.0, 0.2), (-2.0, -1.0));
        // A < 0 below the band: min(-0.5, -0.8) selects the clipped term
        close(surrogate_term(0.5, -1.0, 0.2), (-0.8, 0.0));
        // inside the band both branches agree
        close(surrogate_term(1.1, 3.0, 0.2), (3.3, 3.0));
        // zero-width band: no gradient at ratio 1
        close(surrogate_term(1.0, 3.0, 0.0), (3.0, 0.0));
    }

    #[test]
    fn log_density_matches_closed_form() {
        let lp = gaussian_log_density(&[1.0], &[0.0], &[0.0]);
        assert!((lp - (-0.5 - 0.5 * (2.0 * PI).ln())).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = PpoConfig {
            clip: 1.0,
            ..PpoConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = PpoConfig {
            clip: 0.0,
            ..PpoConfig::default()
        };
        assert!(zero.validate().is_ok());
    }

    #[test]
    fn ratio_is_one_for_unchanged_policy() {
        let mut agent = PpoAgent::new(4, &SystemParams::default(), PpoConfig::default(), 3).unwrap();
        let obs = [0.1, -0.2, 0.3, 0.0];
        let (a, lp) = agent.sample(&obs).unwrap();
        let s = RolloutStep {
            s: obs.to_vec(),
            a,
            log_prob: lp,
            r: 0.0,
            v: 0.0,
            terminal: false,
        };
        assert_eq!(agent.probability_ratio(&s).unwrap(), 1.0);
    }
}
