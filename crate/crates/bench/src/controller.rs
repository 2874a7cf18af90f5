use std::fs;
use std::path::Path;

use ewip_core::checkpoint;
use ewip_core::ddpg::{self, DdpgAgent};
use ewip_core::dynamics::ControlInput;
use ewip_core::environment::{Environment, Observation};
use ewip_core::mpc::MpcController;
use ewip_core::ppo::{self, PpoAgent};

use crate::config::{ControllerKind, ExperimentConfig};
use crate::error::BenchError;

/// Anything that maps the current environment to a control input.
pub trait Policy {
    /// Start of an episode.
    fn reset(&mut self) {}

    fn act(&mut self, env: &Environment, obs: &Observation) -> Result<ControlInput, BenchError>;

    /// Observation width the policy was built for, if it reads observations.
    fn obs_dim(&self) -> Option<usize> {
        None
    }

    /// The last action repeated a previous input because the solve failed.
    fn fell_back(&self) -> bool {
        false
    }
}

impl Policy for &DdpgAgent {
    fn act(&mut self, _: &Environment, obs: &Observation) -> Result<ControlInput, BenchError> {
        Ok(DdpgAgent::act(self, obs.as_slice())?)
    }

    fn obs_dim(&self) -> Option<usize> {
        Some(DdpgAgent::obs_dim(self))
    }
}

/// Evaluation uses the policy mean.
impl Policy for &PpoAgent {
    fn act(&mut self, _: &Environment, obs: &Observation) -> Result<ControlInput, BenchError> {
        Ok(PpoAgent::act(self, obs.as_slice())?)
    }

    fn obs_dim(&self) -> Option<usize> {
        Some(PpoAgent::obs_dim(self))
    }
}

/// Full state feedback with the reference sampled over the prediction horizon.
impl Policy for MpcController {
    fn reset(&mut self) {
        MpcController::reset(self);
    }

    fn act(&mut self, env: &Environment, _: &Observation) -> Result<ControlInput, BenchError> {
        let p = self.config().prediction_horizon;
        let dt = self.config().sample_time;
        let t = env.time();
        let window: Vec<(f64, f64)> = (1..=p)
            .map(|i| env.trajectory().at(t + i as f64 * dt))
            .collect();
        Ok(self.control(env.state(), &window)?)
    }

    fn fell_back(&self) -> bool {
        self.last_step().fallback
    }
}

#[derive(Debug, Clone)]
pub enum Controller {
    Ddpg(DdpgAgent),
    Ppo(PpoAgent),
    Mpc(MpcController),
}

impl Controller {
    /// Build the MPC from the config, or restore an agent checkpoint. The
    /// checkpoint must match the configured kind and observation width.
    pub fn load(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Self, BenchError> {
        if config.kind == ControllerKind::Mpc {
            if checkpoint.is_some() {
                return Err(BenchError::validation("mpc takes no checkpoint"));
            }
            return Ok(Self::Mpc(MpcController::new(config.plant, config.mpc.clone())?));
        }
        let path = checkpoint.ok_or_else(|| {
            BenchError::validation(format!("kind {} needs a checkpoint", config.kind))
        })?;
        let text = fs::read_to_string(path).map_err(|e| {
            BenchError::validation(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        let found = checkpoint::peek_kind(&text)
            .map_err(|e| BenchError::validation(format!("{}: {e}", path.display())))?;
        let expected = if config.kind.is_ddpg() {
            ddpg::CHECKPOINT_KIND
        } else {
            ppo::CHECKPOINT_KIND
        };
        if found != expected {
            return Err(BenchError::validation(format!(
                "checkpoint {} holds `{found}`, config kind {} needs `{expected}`",
                path.display(),
                config.kind
            )));
        }
        let controller = if config.kind.is_ddpg() {
            Self::Ddpg(DdpgAgent::from_checkpoint(&text)?)
        } else {
            Self::Ppo(PpoAgent::from_checkpoint(&text)?)
        };
        let width = config.env.observation_width();
        if let Some(dim) = controller.obs_dim() {
            if dim != width {
                return Err(BenchError::validation(format!(
                    "checkpoint expects {dim} observations, env produces {width} (error_history = {})",
                    config.env.error_history
                )));
            }
        }
        Ok(controller)
    }
}

impl Policy for Controller {
    fn reset(&mut self) {
        if let Self::Mpc(m) = self {
            m.reset();
        }
    }

    fn act(&mut self, env: &Environment, obs: &Observation) -> Result<ControlInput, BenchError> {
        match self {
            Self::Ddpg(a) => Policy::act(&mut &*a, env, obs),
            Self::Ppo(a) => Policy::act(&mut &*a, env, obs),
            Self::Mpc(m) => Policy::act(m, env, obs),
        }
    }

    fn obs_dim(&self) -> Option<usize> {
        match self {
            Self::Ddpg(a) => Some(a.obs_dim()),
            Self::Ppo(a) => Some(a.obs_dim()),
            Self::Mpc(_) => None,
        }
    }

    fn fell_back(&self) -> bool {
        matches!(self, Self::Mpc(m) if m.last_step().fallback)
    }
}
