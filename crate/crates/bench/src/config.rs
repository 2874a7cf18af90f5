//! Experiment configuration files.
//!
//! One TOML document per experiment. Plant parameters may be shared through
//! `plant_file = "plant.toml"` (resolved relative to the including file); an
//! inline `[plant]` table overrides individual entries. The `[env]` table is
//! merged over defaults chosen by the controller kind (sample time and the
//! error-history flag), so most experiment files stay short.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ewip_core::ddpg::DdpgConfig;
use ewip_core::dynamics::SystemParams;
use ewip_core::environment::{EnvConfig, ReferenceTrajectory};
use ewip_core::mpc::MpcConfig;
use ewip_core::ppo::PpoConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Ddpg,
    DdpgEh,
    Ppo,
    PpoEh,
    Mpc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::Ddpg,
        ControllerKind::DdpgEh,
        ControllerKind::Ppo,
        ControllerKind::PpoEh,
        ControllerKind::Mpc,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ddpg => "ddpg",
            Self::DdpgEh => "ddpg-eh",
            Self::Ppo => "ppo",
            Self::PpoEh => "ppo-eh",
            Self::Mpc => "mpc",
        }
    }

    pub fn is_rl(self) -> bool {
        self != Self::Mpc
    }

    pub fn is_ddpg(self) -> bool {
        matches!(self, Self::Ddpg | Self::DdpgEh)
    }

    pub fn is_ppo(self) -> bool {
        matches!(self, Self::Ppo | Self::PpoEh)
    }

    pub fn error_history(self) -> bool {
        matches!(self, Self::DdpgEh | Self::PpoEh)
    }

    /// Control period used in the published experiments.
    pub fn nominal_sample_time(self) -> f64 {
        if self.is_ddpg() {
            0.05
        } else {
            0.01
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// DDPG episode budget.
    pub episodes: usize,
    /// PPO update budget.
    pub updates: usize,
    /// Deterministic evaluation every this many episodes (DDPG) or updates (PPO).
    pub eval_every: usize,
    /// Stop as soon as an evaluation succeeds.
    pub stop_on_success: bool,
    /// Final |x - x_ref| below which a non-falling evaluation counts as success.
    pub success_tolerance: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            updates: 500,
            eval_every: 10,
            stop_on_success: false,
            success_tolerance: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Half-width of the seeded initial tilt; zero starts exactly upright.
    pub theta_noise: f64,
    /// Reference to track; the point-to-point task when absent.
    pub trajectory: Option<ReferenceTrajectory>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            theta_noise: 0.0,
            trajectory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ControllerKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub plant: SystemParams,
    pub env: EnvConfig,
    pub ddpg: DdpgConfig,
    pub ppo: PpoConfig,
    pub mpc: MpcConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

const TOP_LEVEL_KEYS: [&str; 12] = [
    "kind",
    "seed",
    "output_dir",
    "plant_file",
    "plant",
    "env",
    "ddpg",
    "ppo",
    "mpc",
    "training",
    "evaluation",
    "description",
];

fn kind_env(kind: ControllerKind) -> EnvConfig {
    EnvConfig {
        sample_time: kind.nominal_sample_time(),
        error_history: kind.error_history(),
        ..EnvConfig::default()
    }
}

/// Overlay `over` onto `base`, descending into tables.
fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn unknown_keys(user: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        match (known.get(k), v) {
            (None, _) => out.push(format!("{prefix}{k}")),
            (Some(Value::Table(kt)), Value::Table(ut)) => {
                unknown_keys(ut, kt, &format!("{prefix}{k}."), out)
            }
            _ => {}
        }
    }
}

/// Deserialize `section` from `defaults` overlaid with `user`, rejecting keys
/// the target type does not know.
fn section<T: Serialize + DeserializeOwned + Clone>(
    name: &str,
    defaults: &T,
    user: Option<&Table>,
) -> Result<T, BenchError> {
    let Some(user) = user else {
        return Ok(defaults.clone());
    };
    let mut base = match Value::try_from(defaults) {
        Ok(Value::Table(t)) => t,
        _ => Table::new(),
    };
    let mut bad = Vec::new();
    unknown_keys(user, &base, &format!("{name}."), &mut bad);
    // optional sub-tables are absent from the defaults; let serde judge them
    bad.retain(|k| !k.starts_with("env.trajectory") && !k.starts_with("evaluation.trajectory"));
    bad.retain(|k| !k.ends_with(".clip"));
    if !bad.is_empty() {
        return Err(BenchError::validation(format!(
            "unknown config keys: {}",
            bad.join(", ")
        )));
    }
    merge(&mut base, user);
    Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| BenchError::validation(format!("[{name}]: {}", e.message())))
}

fn table<'a>(doc: &'a Table, key: &str) -> Result<Option<&'a Table>, BenchError> {
    match doc.get(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(BenchError::validation(format!("`{key}` must be a table"))),
    }
}

impl ExperimentConfig {
    /// Defaults for a controller kind.
    pub fn for_kind(kind: ControllerKind) -> Self {
        Self {
            kind,
            seed: 0,
            output_dir: PathBuf::from("runs").join(kind.as_str()),
            plant: SystemParams::default(),
            env: kind_env(kind),
            ddpg: DdpgConfig::default(),
            ppo: PpoConfig::default(),
            mpc: MpcConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }

    /// Read, merge and validate a config file. Returns the warnings alongside.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>), BenchError> {
        let text = fs::read_to_string(path).map_err(|e| {
            BenchError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parse a config document; `plant_file` resolves against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<(Self, Vec<String>), BenchError> {
        let doc: Table = text
            .parse()
            .map_err(|e: toml::de::Error| BenchError::validation(format!("config: {}", e.message())))?;
        let stray: Vec<&str> = doc
            .keys()
            .map(String::as_str)
            .filter(|k| !TOP_LEVEL_KEYS.contains(k))
            .collect();
        if !stray.is_empty() {
            return Err(BenchError::validation(format!(
                "unknown config keys: {}",
                stray.join(", ")
            )));
        }
        let kind = match doc.get("kind") {
            Some(Value::String(s)) => ControllerKind::parse(s).ok_or_else(|| {
                BenchError::validation(format!(
                    "unknown controller kind `{s}` (expected ddpg, ddpg-eh, ppo, ppo-eh or mpc)"
                ))
            })?,
            _ => return Err(BenchError::validation("missing string key `kind`")),
        };
        let mut cfg = Self::for_kind(kind);
        match doc.get("seed") {
            None => {}
            Some(Value::Integer(s)) if *s >= 0 => cfg.seed = *s as u64,
            Some(_) => return Err(BenchError::validation("`seed` must be a non-negative integer")),
        }
        match doc.get("output_dir") {
            None => {}
            Some(Value::String(s)) => cfg.output_dir = PathBuf::from(s),
            Some(_) => return Err(BenchError::validation("`output_dir` must be a string")),
        }

        let mut plant = Table::new();
        match doc.get("plant_file") {
            None => {}
            Some(Value::String(f)) => {
                let path = base_dir.join(f);
                let text = fs::read_to_string(&path).map_err(|e| {
                    BenchError::validation(format!("cannot read plant file {}: {e}", path.display()))
                })?;
                let included: Table = text.parse().map_err(|e: toml::de::Error| {
                    BenchError::validation(format!("{}: {}", path.display(), e.message()))
                })?;
                // accept either a bare table or one wrapped in [plant]
                match included.get("plant") {
                    Some(Value::Table(t)) if included.len() == 1 => plant = t.clone(),
                    _ => plant = included,
                }
            }
            Some(_) => return Err(BenchError::validation("`plant_file` must be a string")),
        }
        if let Some(t) = table(&doc, "plant")? {
            merge(&mut plant, t);
        }
        let plant = (!plant.is_empty()).then_some(&plant);

        cfg.plant = section("plant", &cfg.plant, plant)?;
        cfg.env = section("env", &cfg.env, table(&doc, "env")?)?;
        cfg.ddpg = section("ddpg", &cfg.ddpg, table(&doc, "ddpg")?)?;
        cfg.ppo = section("ppo", &cfg.ppo, table(&doc, "ppo")?)?;
        cfg.mpc = section("mpc", &cfg.mpc, table(&doc, "mpc")?)?;
        cfg.training = section("training", &cfg.training, table(&doc, "training")?)?;
        cfg.evaluation = section("evaluation", &cfg.evaluation, table(&doc, "evaluation")?)?;
        let warnings = cfg.validate()?;
        Ok((cfg, warnings))
    }

    /// Check every sub-config. Soft problems come back as warnings.
    pub fn validate(&self) -> Result<Vec<String>, BenchError> {
        let v = |e: &dyn fmt::Display| BenchError::validation(e.to_string());
        self.plant.validate().map_err(|e| v(&e))?;
        self.env.validate(&self.plant).map_err(|e| v(&e))?;
        if let Some(t) = &self.evaluation.trajectory {
            t.validate().map_err(|e| v(&e))?;
        }
        if !(self.evaluation.theta_noise >= 0.0) {
            return Err(BenchError::validation("evaluation.theta_noise must be >= 0"));
        }
        let mut warnings = Vec::new();
        match self.kind {
            k if k.is_rl() => {
                if self.env.error_history != k.error_history() {
                    return Err(BenchError::validation(format!(
                        "kind {k} needs env.error_history = {} (observation width {}), config has {}",
                        k.error_history(),
                        kind_env(k).observation_width(),
                        self.env.error_history
                    )));
                }
                if k.is_ddpg() {
                    self.ddpg.validate().map_err(|e| v(&e))?;
                } else {
                    self.ppo.validate().map_err(|e| v(&e))?;
                }
                if self.training.eval_every == 0 {
                    return Err(BenchError::validation("training.eval_every must be >= 1"));
                }
                if !(self.training.success_tolerance > 0.0) {
                    return Err(BenchError::validation("training.success_tolerance must be > 0"));
                }
            }
            _ => {
                self.mpc.validate(&self.plant).map_err(|e| v(&e))?;
                if (self.mpc.sample_time - self.env.sample_time).abs() > 1e-12 {
                    return Err(BenchError::validation(format!(
                        "mpc.sample_time {} differs from env.sample_time {}",
                        self.mpc.sample_time, self.env.sample_time
                    )));
                }
            }
        }
        let nominal = self.kind.nominal_sample_time();
        if (self.env.sample_time - nominal).abs() > 1e-12 {
            warnings.push(format!(
                "{} is normally run at a {nominal} s sample time, config uses {} s",
                self.kind, self.env.sample_time
            ));
        }
        Ok(warnings)
    }

    /// Environment used for deterministic evaluation episodes: one pass over
    /// the reference trajectory, no exploration, optional seeded tilt.
    pub fn evaluation_env(&self) -> EnvConfig {
        let trajectory = self
            .evaluation
            .trajectory
            .clone()
            .unwrap_or_else(|| self.env.trajectory(&self.plant));
        EnvConfig {
            episode_length: trajectory.duration(),
            init_theta_noise: self.evaluation.theta_noise,
            trajectory: Some(trajectory),
            ..self.env.clone()
        }
    }
}
