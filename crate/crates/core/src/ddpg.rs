//! Deep deterministic policy gradient with replay and soft-updated targets.
//!
//! The critic sees the observation concatenated with the action divided by the
//! actuator limits, so both critic inputs are O(1). The actor emits raw
//! actions through a tanh scaled to the limits.

use std::collections::VecDeque;
use std::ops::ControlFlow;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::dynamics::{ControlInput, SystemParams};
use crate::environment::{EnvError, Environment};
use crate::neural::{Adam, AdamConfig, Gradients, Mlp, NeuralError, OutputKind, RunningNorm};

pub const CHECKPOINT_KIND: &str = "ewip-ddpg";

#[derive(Debug, Error)]
pub enum DdpgError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged in episode {episode}: non-finite {what}")]
    Diverged { episode: usize, what: &'static str },
    #[error("observation width {got} does not match agent width {expected}")]
    ObservationWidth { expected: usize, got: usize },
    #[error("invalid DDPG config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    pub gamma: f64,
    /// Soft target update mix per gradient step.
    pub target_mix: f64,
    pub actor: AdamConfig,
    pub critic: AdamConfig,
    pub batch_size: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    /// Initial exploration std as a fraction of each actuator limit.
    pub noise_sigma: f64,
    /// Per-episode multiplicative decay of the exploration std.
    pub noise_decay: f64,
    pub normalize_observations: bool,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            target_mix: 0.001,
            actor: AdamConfig {
                learning_rate: 1e-5,
                clip: Some(1.0),
                ..AdamConfig::default()
            },
            critic: AdamConfig {
                learning_rate: 1e-4,
                clip: Some(1.0),
                ..AdamConfig::default()
            },
            batch_size: 64,
            warmup: 1000,
            buffer_capacity: 1_000_000,
            hidden: vec![128, 128],
            noise_sigma: 0.2,
            noise_decay: 0.995,
            normalize_observations: true,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<(), DdpgError> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(DdpgError::InvalidConfig(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.target_mix) {
            return Err(DdpgError::InvalidConfig("target_mix outside [0, 1]".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(DdpgError::InvalidConfig(
                "need 0 < batch_size <= buffer_capacity".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(DdpgError::InvalidConfig("negative noise".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: ControlInput,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Episode ended by failure; no bootstrap from `next_obs`.
    pub terminal: bool,
}

/// FIFO experience store with uniform minibatch sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Distinct indices within one minibatch.
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<&Transition> {
        let n = size.min(self.items.len());
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdpgAgent {
    config: DdpgConfig,
    obs_dim: usize,
    limits: [f64; 2],
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub normalizer: RunningNorm,
    rng: ChaCha8Rng,
    /// Current exploration std as a fraction of the limits.
    sigma: f64,
    episodes_done: usize,
}

impl DdpgAgent {
    pub fn new(
        obs_dim: usize,
        params: &SystemParams,
        config: DdpgConfig,
        seed: u64,
    ) -> Result<Self, DdpgError> {
        config.validate()?;
        let limits = [params.tau_max, params.f_max];
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(2);
        let mut critic_sizes = vec![obs_dim + 2];
        critic_sizes.extend(&config.hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(
            &actor_sizes,
            OutputKind::TanhScaled(limits.to_vec()),
            seeds.random(),
        )?;
        let critic = Mlp::new(&critic_sizes, OutputKind::Linear, seeds.random())?;
        Ok(Self {
            obs_dim,
            limits,
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor_opt: Adam::for_net(config.actor, &actor),
            critic_opt: Adam::for_net(config.critic, &critic),
            actor,
            critic,
            normalizer: RunningNorm::new(obs_dim, config.normalize_observations),
            rng: ChaCha8Rng::seed_from_u64(seeds.random()),
            sigma: config.noise_sigma,
            episodes_done: 0,
            config,
        })
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn noise_sigma(&self) -> f64 {
        self.sigma
    }

    pub fn set_noise_sigma(&mut self, sigma: f64) {
        self.sigma = sigma;
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), DdpgError> {
        if obs.len() != self.obs_dim {
            return Err(DdpgError::ObservationWidth {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    /// Deterministic policy output.
    pub fn act(&self, obs: &[f64]) -> Result<ControlInput, DdpgError> {
        self.check_obs(obs)?;
        let y = self.actor.forward(&self.normalizer.normalize(obs))?;
        Ok(ControlInput::new(y[0], y[1]))
    }

    /// Policy output plus Gaussian noise of std `sigma * limit`, saturated.
    pub fn exploration_action_with<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        sigma: f64,
        rng: &mut R,
    ) -> Result<ControlInput, DdpgError> {
        let mu = self.act(obs)?;
        let mut a = mu.to_array();
        for (v, lim) in a.iter_mut().zip(self.limits) {
            let n: f64 = StandardNormal.sample(rng);
            *v = (*v + sigma * lim * n).clamp(-lim, lim);
        }
        Ok(ControlInput::from_slice(&a))
    }

    pub fn exploration_action(&mut self, obs: &[f64]) -> Result<ControlInput, DdpgError> {
        let mut rng = self.rng.clone();
        let a = self.exploration_action_with(obs, self.sigma, &mut rng);
        self.rng = rng;
        a
    }

    fn obs_matrix<'a>(&self, obs: impl ExactSizeIterator<Item = &'a [f64]>) -> DMatrix<f64> {
        self.normalizer.normalize_batch(obs)
    }

    /// Stack normalized observations over scaled actions.
    fn critic_input(&self, obs: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let batch = obs.ncols();
        let mut m = DMatrix::zeros(self.obs_dim + 2, batch);
        m.rows_mut(0, self.obs_dim).copy_from(obs);
        for j in 0..batch {
            for k in 0..2 {
                m[(self.obs_dim + k, j)] = actions[(k, j)] / self.limits[k];
            }
        }
        m
    }

    /// Bellman targets `r + gamma Q'(s', mu'(s'))`, or `r` on terminal steps.
    pub fn target_values(&self, batch: &[&Transition]) -> Result<Vec<f64>, DdpgError> {
        let next = self.obs_matrix(batch.iter().map(|t| t.next_obs.as_slice()));
        let next_actions = self.target_actor.forward_batch(&next)?;
        let q_next = self
            .target_critic
            .forward_batch(&self.critic_input(&next, &next_actions))?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(j, t)| {
                if t.terminal {
                    t.reward
                } else {
                    t.reward + self.config.gamma * q_next[(0, j)]
                }
            })
            .collect())
    }

    fn batch_actions(batch: &[&Transition]) -> DMatrix<f64> {
        DMatrix::from_fn(2, batch.len(), |k, j| batch[j].action.to_array()[k])
    }

    /// Mean squared Bellman error against fixed targets, and its critic gradient.
    pub fn critic_loss_with_targets(
        &self,
        batch: &[&Transition],
        targets: &[f64],
    ) -> Result<(f64, Gradients), DdpgError> {
        let m = batch.len() as f64;
        let obs = self.obs_matrix(batch.iter().map(|t| t.obs.as_slice()));
        let input = self.critic_input(&obs, &Self::batch_actions(batch));
        let pass = self.critic.forward_recorded(&input)?;
        let q = pass.output();
        let mut loss = 0.0;
        let mut seed = DMatrix::zeros(1, batch.len());
        for j in 0..batch.len() {
            let r = q[(0, j)] - targets[j];
            loss += r * r / m;
            seed[(0, j)] = 2.0 * r / m;
        }
        let (grads, _) = self.critic.backward(&pass, &seed)?;
        Ok((loss, grads))
    }

    pub fn critic_loss(&self, batch: &[&Transition]) -> Result<(f64, Gradients), DdpgError> {
        let y = self.target_values(batch)?;
        self.critic_loss_with_targets(batch, &y)
    }

    /// Mean `Q(s, mu(s))` over the batch and its gradient w.r.t. the actor
    /// parameters (the ascent direction), critic held fixed.
    pub fn actor_gradient(&self, batch: &[&Transition]) -> Result<(f64, Gradients), DdpgError> {
        let m = batch.len() as f64;
        let obs = self.obs_matrix(batch.iter().map(|t| t.obs.as_slice()));
        let actor_pass = self.actor.forward_recorded(&obs)?;
        let input = self.critic_input(&obs, actor_pass.output());
        let critic_pass = self.critic.forward_recorded(&input)?;
        let objective = critic_pass.output().iter().sum::<f64>() / m;
        let seed = DMatrix::from_element(1, batch.len(), 1.0 / m);
        let (_, dq_dinput) = self.critic.backward(&critic_pass, &seed)?;
        let mut dq_da = DMatrix::zeros(2, batch.len());
        for j in 0..batch.len() {
            for k in 0..2 {
                dq_da[(k, j)] = dq_dinput[(self.obs_dim + k, j)] / self.limits[k];
            }
        }
        let (grads, _) = self.actor.backward(&actor_pass, &dq_da)?;
        Ok((objective, grads))
    }

    /// Critic descent step on fixed targets, leaving actor and targets alone.
    pub fn critic_step(&mut self, batch: &[&Transition], targets: &[f64]) -> Result<f64, DdpgError> {
        let (loss, grads) = self.critic_loss_with_targets(batch, targets)?;
        self.critic_opt.update_net(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// One full update: critic descent, actor ascent, soft target tracking.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateStats, DdpgError> {
        let targets = self.target_values(batch)?;
        let (critic_loss, critic_grads) = self.critic_loss_with_targets(batch, &targets)?;
        if !critic_loss.is_finite() {
            return Err(DdpgError::Diverged {
                episode: self.episodes_done,
                what: "critic loss",
            });
        }
        self.critic_opt.update_net(&mut self.critic, &critic_grads)?;
        let (actor_objective, mut actor_grads) = self.actor_gradient(batch)?;
        if !actor_objective.is_finite() {
            return Err(DdpgError::Diverged {
                episode: self.episodes_done,
                what: "actor objective",
            });
        }
        actor_grads.scale(-1.0);
        self.actor_opt.update_net(&mut self.actor, &actor_grads)?;
        self.target_actor
            .soft_update_from(&self.actor, self.config.target_mix)?;
        self.target_critic
            .soft_update_from(&self.critic, self.config.target_mix)?;
        Ok(UpdateStats {
            critic_loss,
            actor_objective,
        })
    }

    pub fn to_checkpoint(&self) -> Result<String, DdpgError> {
        Ok(checkpoint::to_string(CHECKPOINT_KIND, self)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, DdpgError> {
        Ok(checkpoint::from_str(CHECKPOINT_KIND, text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdpgLogRow {
    pub episode: usize,
    pub steps: usize,
    pub total_reward: f64,
    /// Mean over the episode's updates; NaN before warmup ends.
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub noise_sigma: f64,
}

/// Training loop: roll out with exploration noise, store transitions, one
/// minibatch update per environment step once the warmup is filled.
///
/// Episode `k` resets the environment with seed `seed + k`. The callback runs
/// after each episode and may stop training early.
pub fn train(
    env: &mut Environment,
    agent: &mut DdpgAgent,
    episodes: usize,
    seed: u64,
    mut on_episode: impl FnMut(&DdpgAgent, &DdpgLogRow) -> ControlFlow<()>,
) -> Result<Vec<DdpgLogRow>, DdpgError> {
    if env.observation_width() != agent.obs_dim {
        return Err(DdpgError::ObservationWidth {
            expected: agent.obs_dim,
            got: env.observation_width(),
        });
    }
    let mut buffer = ReplayBuffer::new(agent.config.buffer_capacity);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ddb);
    let mut log = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let mut obs = env.reset(seed.wrapping_add(episode as u64));
        agent.normalizer.update(obs.as_slice());
        let (mut total_reward, mut steps, mut updates) = (0.0, 0, 0);
        let (mut loss_sum, mut obj_sum) = (0.0, 0.0);
        loop {
            let action = agent.exploration_action(obs.as_slice())?;
            let result = env.step(action)?;
            agent.normalizer.update(result.observation.as_slice());
            buffer.push(Transition {
                obs: obs.0,
                action: result.diagnostics.applied,
                reward: result.reward.total,
                next_obs: result.observation.0.clone(),
                terminal: result.failed,
            });
            total_reward += result.reward.total;
            steps += 1;
            if buffer.len() >= agent.config.warmup.max(agent.config.batch_size) {
                let batch = buffer.sample(agent.config.batch_size, &mut sample_rng);
                let stats = agent.update(&batch).map_err(|e| match e {
                    DdpgError::Neural(NeuralError::NonFiniteGradient { .. }) => DdpgError::Diverged {
                        episode,
                        what: "gradient",
                    },
                    other => other,
                })?;
                loss_sum += stats.critic_loss;
                obj_sum += stats.actor_objective;
                updates += 1;
            }
            obs = result.observation;
            if result.done {
                break;
            }
        }
        let row = DdpgLogRow {
            episode,
            steps,
            total_reward,
            critic_loss: if updates > 0 { loss_sum / updates as f64 } else { f64::NAN },
            actor_objective: if updates > 0 { obj_sum / updates as f64 } else { f64::NAN },
            noise_sigma: agent.sigma,
        };
        agent.sigma *= agent.config.noise_decay;
        agent.episodes_done += 1;
        log.push(row);
        if on_episode(agent, &row).is_break() {
            break;
        }
    }
    Ok(log)
}
