//! Instantaneous effort response over a grid of initial conditions.

use std::io;
use std::path::Path;

use ewip_core::dynamics::{ControlInput, State};
use ewip_core::environment::Environment;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::controller::Policy;
use crate::error::BenchError;

/// State coordinate varied along a grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Theta,
    ThetaRate,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Theta => "theta",
            Var::ThetaRate => "thetad",
        }
    }

    fn set(self, s: &mut State, v: f64) {
        match self {
            Var::X => s.x = v,
            Var::Theta => s.theta = v,
            Var::ThetaRate => s.thetad = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub var: Var,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(var: Var, lo: f64, hi: f64, n: usize) -> Self {
        Self { var, lo, hi, n }
    }

    /// `n` evenly spaced points; a single point sits at the centre. Points
    /// mirror exactly about the centre.
    pub fn values(&self) -> Vec<f64> {
        let (c, h) = (0.5 * (self.lo + self.hi), 0.5 * (self.hi - self.lo));
        match self.n {
            0 => Vec::new(),
            1 => vec![c],
            n => (0..n)
                .map(|i| c + h * ((2 * i) as f64 - (n - 1) as f64) / (n - 1) as f64)
                .collect(),
        }
    }
}

/// Default grids: (x, theta) and (thetad, theta), 21 points per axis.
pub fn default_grids(n: usize) -> [(Axis, Axis); 2] {
    let theta = Axis::new(Var::Theta, -0.3, 0.3, n);
    [
        (Axis::new(Var::X, -1.0, 1.0, n), theta),
        (Axis::new(Var::ThetaRate, -1.5, 1.5, n), theta),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub f_in: f64,
}

/// First action from a fresh episode started at `state`.
pub fn response(
    policy: &mut dyn Policy,
    config: &ExperimentConfig,
    state: State,
) -> Result<ControlInput, BenchError> {
    let mut env = Environment::new(config.evaluation_env(), config.plant)?;
    policy.reset();
    let obs = env.reset_to(state);
    policy.act(&env, &obs)
}

/// One row per grid point, `first` varying slowest. All other states sit at
/// the reference: upright, at rest, on the start of the trajectory.
pub fn sweep(
    policy: &mut dyn Policy,
    config: &ExperimentConfig,
    first: Axis,
    second: Axis,
) -> Result<Vec<SweepRow>, BenchError> {
    let env = config.evaluation_env();
    let (x0, _) = env.trajectory(&config.plant).at(0.0);
    let base = State {
        x: x0,
        ..State::upright(&config.plant, env.l_ref)
    };
    let mut rows = Vec::with_capacity(first.n * second.n);
    for a in first.values() {
        for b in second.values() {
            let mut s = base;
            first.var.set(&mut s, a);
            second.var.set(&mut s, b);
            let u = response(policy, config, s)?;
            rows.push(SweepRow {
                a,
                b,
                tau: u.tau,
                f_in: u.f_in,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: io::Write>(
    rows: &[SweepRow],
    first: Var,
    second: Var,
    out: W,
) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([first.name(), second.name(), "tau", "f_in"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(rows: &[SweepRow], first: Var, second: Var, path: &Path) -> Result<(), BenchError> {
    write_csv(rows, first, second, std::fs::File::create(path)?)
}
