//! Trajectory-tracking task wrapped around the plant.
//!
//! Each control step applies a held action for one sample period, pushes the
//! latest `(e_x, e_z)` tracking error into a fixed-depth history and scores the
//! step with the shaped reward. Failure (|theta| or |x| out of bounds) ends the
//! episode; so does reaching the episode horizon.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, bob_position, ControlInput, DynamicsError, State, SystemParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode finished; call reset before stepping")]
    EpisodeFinished,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// One leg of a piecewise-linear position reference. Over `[t_start, t_end]`
/// the reference moves linearly from the previous leg's target to `x_target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub x_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    /// Reference position before the first segment starts moving.
    pub x_initial: f64,
    pub segments: Vec<Segment>,
    /// Bob height reference (m).
    pub z_ref: f64,
}

impl ReferenceTrajectory {
    /// Hold for 3 s, move 2 m forward over 4 s, hold for 3 s.
    pub fn point_to_point(z_ref: f64) -> Self {
        Self {
            x_initial: 0.0,
            segments: vec![
                Segment {
                    t_start: 0.0,
                    t_end: 3.0,
                    x_target: 0.0,
                },
                Segment {
                    t_start: 3.0,
                    t_end: 7.0,
                    x_target: 2.0,
                },
                Segment {
                    t_start: 7.0,
                    t_end: 10.0,
                    x_target: 2.0,
                },
            ],
            z_ref,
        }
    }

    /// Constant reference at `x`.
    pub fn stationary(x: f64, z_ref: f64, duration: f64) -> Self {
        Self {
            x_initial: x,
            segments: vec![Segment {
                t_start: 0.0,
                t_end: duration,
                x_target: x,
            }],
            z_ref,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut t = match self.segments.first() {
            Some(s) => s.t_start,
            None => return Ok(()),
        };
        if t != 0.0 {
            return Err(EnvError::InvalidConfig(
                "trajectory must start at t = 0".into(),
            ));
        }
        for s in &self.segments {
            if s.t_start != t || !(s.t_end >= s.t_start) {
                return Err(EnvError::InvalidConfig(format!(
                    "segments must be contiguous and monotone, bad segment {s:?}"
                )));
            }
            if !s.x_target.is_finite() {
                return Err(EnvError::InvalidConfig("non-finite target".into()));
            }
            t = s.t_end;
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t_end)
    }

    /// `(x_ref, z_ref)` at time `t`, clamped to the trajectory's end points.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let mut x_prev = self.x_initial;
        for seg in &self.segments {
            if t <= seg.t_end {
                if t <= seg.t_start {
                    return (x_prev, self.z_ref);
                }
                let span = seg.t_end - seg.t_start;
                let frac = if span > 0.0 {
                    (t - seg.t_start) / span
                } else {
                    1.0
                };
                return (x_prev + (seg.x_target - x_prev) * frac, self.z_ref);
            }
            x_prev = seg.x_target;
        }
        (x_prev, self.z_ref)
    }
}

/// Coefficients of the shaped reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub theta: f64,
    pub theta_rate: f64,
    pub effort: f64,
    pub e_x: f64,
    pub e_z: f64,
    pub prev_rates: f64,
    pub alive_bonus: f64,
    pub angle_violation: f64,
    pub position_violation: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            theta: 0.2,
            theta_rate: 0.25,
            effort: 0.02,
            e_x: 0.75,
            e_z: 0.05,
            prev_rates: 0.5,
            alive_bonus: 0.3,
            angle_violation: -50.0,
            position_violation: -100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminationBounds {
    pub theta_fail: f64,
    pub x_fail: f64,
}

impl Default for TerminationBounds {
    fn default() -> Self {
        Self {
            theta_fail: FRAC_PI_4,
            x_fail: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Control period (s).
    pub sample_time: f64,
    /// Integrator step (s); `sample_time` must be a whole multiple.
    pub integrator_dt: f64,
    pub episode_length: f64,
    /// Append the error history to observations.
    pub error_history: bool,
    pub history_depth: usize,
    /// Link length at rest; sets the bob height reference.
    pub l_ref: f64,
    /// Half-width of the uniform initial tilt (rad).
    pub init_theta_noise: f64,
    pub reward: RewardWeights,
    pub bounds: TerminationBounds,
    /// Defaults to the point-to-point task when absent.
    pub trajectory: Option<ReferenceTrajectory>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sample_time: 0.05,
            integrator_dt: 0.002,
            episode_length: 10.0,
            error_history: true,
            history_depth: 6,
            l_ref: 0.375,
            init_theta_noise: 0.05,
            reward: RewardWeights::default(),
            bounds: TerminationBounds::default(),
            trajectory: None,
        }
    }
}

impl EnvConfig {
    pub fn observation_width(&self) -> usize {
        if self.error_history {
            dynamics::STATE_DIM + 2 * self.history_depth
        } else {
            dynamics::STATE_DIM
        }
    }

    pub fn substeps(&self) -> usize {
        (self.sample_time / self.integrator_dt).round() as usize
    }

    pub fn max_steps(&self) -> usize {
        (self.episode_length / self.sample_time).round() as usize
    }

    pub fn trajectory(&self, params: &SystemParams) -> ReferenceTrajectory {
        self.trajectory
            .clone()
            .unwrap_or_else(|| ReferenceTrajectory::point_to_point(params.r_w + self.l_ref))
    }

    pub fn validate(&self, params: &SystemParams) -> Result<(), EnvError> {
        if !(self.sample_time > 0.0 && self.integrator_dt > 0.0) {
            return Err(EnvError::InvalidConfig(
                "sample_time and integrator_dt must be positive".into(),
            ));
        }
        let ratio = self.sample_time / self.integrator_dt;
        if ratio < 0.5 || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(EnvError::InvalidConfig(format!(
                "sample_time {} is not a multiple of integrator_dt {}",
                self.sample_time, self.integrator_dt
            )));
        }
        if !(self.episode_length >= 0.0) {
            return Err(EnvError::InvalidConfig("negative episode length".into()));
        }
        if !(params.l_min..=params.l_max).contains(&self.l_ref) {
            return Err(EnvError::InvalidConfig(format!(
                "l_ref {} outside link limits",
                self.l_ref
            )));
        }
        if !(self.init_theta_noise >= 0.0) {
            return Err(EnvError::InvalidConfig("negative initial noise".into()));
        }
        if let Some(t) = &self.trajectory {
            t.validate()?;
        }
        Ok(())
    }
}

/// Fixed-depth FIFO of tracking errors, most recent first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistory {
    depth: usize,
    entries: VecDeque<(f64, f64)>,
}

impl ErrorHistory {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            entries: VecDeque::with_capacity(depth + 1),
        }
    }

    pub fn push(&mut self, e_x: f64, e_z: f64) {
        self.entries.push_front((e_x, e_z));
        self.entries.truncate(self.depth);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Entry `k` (0 = most recent); zero before it has been filled.
    pub fn get(&self, k: usize) -> (f64, f64) {
        self.entries.get(k).copied().unwrap_or((0.0, 0.0))
    }
}

/// Network input: the ten plant states, optionally followed by the error history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_observation(state: &State, history: Option<&ErrorHistory>) -> Observation {
    let mut v = state.to_array().to_vec();
    if let Some(h) = history {
        for k in 0..h.depth() {
            let (ex, ez) = h.get(k);
            v.push(ex);
            v.push(ez);
        }
    }
    Observation(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    /// Shaped penalty, never positive.
    pub shaped: f64,
    /// Constraint-violation penalty.
    pub violation: f64,
    pub total: f64,
}

pub fn reward(
    state: &State,
    action: &ControlInput,
    e_x: f64,
    e_z: f64,
    prev_rates: (f64, f64),
    weights: &RewardWeights,
    bounds: &TerminationBounds,
) -> RewardTerms {
    let w = weights;
    let shaped = -(w.theta * state.theta * state.theta
        + w.theta_rate * state.thetad * state.thetad
        + w.effort * (action.tau.abs() + action.f_in.abs())
        + w.e_x * e_x.abs()
        + w.e_z * e_z.abs()
        + w.prev_rates * (prev_rates.0.abs() + prev_rates.1.abs()));
    let mut violation = 0.0;
    if state.theta.abs() > bounds.theta_fail {
        violation += w.angle_violation;
    }
    if state.x.abs() > bounds.x_fail {
        violation += w.position_violation;
    }
    RewardTerms {
        shaped,
        violation,
        total: shaped + violation + w.alive_bonus,
    }
}

/// True when the plant has fallen or left the track.
pub fn done(state: &State, bounds: &TerminationBounds) -> bool {
    state.theta.abs() > bounds.theta_fail || state.x.abs() > bounds.x_fail
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Time at the end of the step (s).
    pub t: f64,
    pub normal_force: f64,
    pub e_x: f64,
    pub e_z: f64,
    pub x_ref: f64,
    pub z_ref: f64,
    /// Action after saturation.
    pub applied: ControlInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: RewardTerms,
    /// Episode over, either by failure or by reaching the horizon.
    pub done: bool,
    /// Episode ended by failure; the bootstrap value must be dropped.
    pub failed: bool,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    params: SystemParams,
    trajectory: ReferenceTrajectory,
    state: State,
    history: ErrorHistory,
    prev_rates: (f64, f64),
    steps: usize,
    finished: bool,
}

impl Environment {
    pub fn new(config: EnvConfig, params: SystemParams) -> Result<Self, EnvError> {
        params.validate()?;
        config.validate(&params)?;
        let trajectory = config.trajectory(&params);
        let history = ErrorHistory::new(config.history_depth);
        let state = State::upright(&params, config.l_ref);
        Ok(Self {
            config,
            params,
            trajectory,
            state,
            history,
            prev_rates: (0.0, 0.0),
            steps: 0,
            finished: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn trajectory(&self) -> &ReferenceTrajectory {
        &self.trajectory
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.config.sample_time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn observation_width(&self) -> usize {
        self.config.observation_width()
    }

    pub fn observation(&self) -> Observation {
        build_observation(
            &self.state,
            self.config.error_history.then_some(&self.history),
        )
    }

    /// Upright rest with a seeded random tilt; clears the error history.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.config.init_theta_noise;
        let theta = if noise > 0.0 {
            rng.random_range(-noise..=noise)
        } else {
            0.0
        };
        self.reset_to(State {
            theta,
            ..State::upright(&self.params, self.config.l_ref)
        })
    }

    /// Start an episode from an explicit state.
    pub fn reset_to(&mut self, state: State) -> Observation {
        self.state = state;
        self.history.clear();
        self.prev_rates = (state.xd, state.zd);
        self.steps = 0;
        self.finished = false;
        self.observation()
    }

    /// Tracking error `reference - actual` on wheel x and bob height.
    pub fn tracking_error(&self, state: &State, t: f64) -> (f64, f64, f64, f64) {
        let (x_ref, z_ref) = self.trajectory.at(t);
        let (_, z_p) = bob_position(state);
        (x_ref - state.x, z_ref - z_p, x_ref, z_ref)
    }

    pub fn step(&mut self, action: ControlInput) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        let applied = action.clamped(&self.params);
        let next = dynamics::integrate(
            &self.state,
            &applied,
            &self.params,
            self.config.integrator_dt,
            self.config.substeps(),
        )?;
        let normal_force = dynamics::normal_force(&next, &applied, &self.params)?;
        self.steps += 1;
        let t = self.time();
        let (e_x, e_z, x_ref, z_ref) = self.tracking_error(&next, t);
        self.history.push(e_x, e_z);
        let terms = reward(
            &next,
            &applied,
            e_x,
            e_z,
            self.prev_rates,
            &self.config.reward,
            &self.config.bounds,
        );
        self.prev_rates = (next.xd, next.zd);
        self.state = next;
        let failed = done(&next, &self.config.bounds);
        let finished = failed || self.steps >= self.config.max_steps();
        self.finished = finished;
        Ok(StepResult {
            observation: self.observation(),
            reward: terms,
            done: finished,
            failed,
            diagnostics: StepDiagnostics {
                t,
                normal_force,
                e_x,
                e_z,
                x_ref,
                z_ref,
                applied,
            },
        })
    }
}
