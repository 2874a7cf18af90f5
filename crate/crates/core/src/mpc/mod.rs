//! Linear MPC around the upright equilibrium.
//!
//! The plant is linearized by central differences, discretized with a
//! zero-order hold and condensed into a QP over the first `m` input moves;
//! later moves repeat the last one. Outputs are the wheel position and the
//! bob height. Predicted lean angles are kept inside a band softened by one
//! shared slack variable.

pub mod qp;

use std::f64::consts::FRAC_PI_6;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    accelerations, state_derivative, ControlInput, DynamicsError, State, SystemParams, STATE_DIM,
};

pub use qp::{ActiveSetSolver, KktResiduals, QpError, QpProblem, QpSolution};

const INPUT_DIM: usize = 2;
const OUTPUT_DIM: usize = 2;
const THETA: usize = 2;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("invalid MPC config: {0}")]
    InvalidConfig(String),
    #[error("no equilibrium input inside the actuator limits: {0}")]
    NoEquilibrium(String),
    #[error("non-finite Jacobian entry at row {row}, column {col}")]
    NonFiniteJacobian { row: usize, col: usize },
    #[error("reference window has {got} points, need {need}")]
    ShortReference { need: usize, got: usize },
    #[error("non-finite state passed to the controller")]
    NonFiniteState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub sample_time: f64,
    pub prediction_horizon: usize,
    pub control_horizon: usize,
    /// Weights on the input deviation from equilibrium, (tau, f_in).
    pub input_weights: [f64; INPUT_DIM],
    pub rate_weights: [f64; INPUT_DIM],
    /// Weights on the tracking error of (x, z_p).
    pub output_weights: [f64; OUTPUT_DIM],
    pub theta_max: f64,
    /// Quadratic penalty on the shared constraint slack.
    pub slack_penalty: f64,
    /// Leg length at the operating point.
    pub l_ref: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            sample_time: 0.01,
            prediction_horizon: 100,
            control_horizon: 15,
            input_weights: [0.0210, 0.2101],
            rate_weights: [0.4759, 0.4759],
            output_weights: [1.0, 1.0],
            theta_max: FRAC_PI_6,
            slack_penalty: 1e4,
            l_ref: 0.375,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, params: &SystemParams) -> Result<(), MpcError> {
        let bad = |m: String| Err(MpcError::InvalidConfig(m));
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return bad(format!("sample_time must be positive, got {}", self.sample_time));
        }
        if self.control_horizon == 0 || self.control_horizon > self.prediction_horizon {
            return bad(format!(
                "need 0 < control horizon ({}) <= prediction horizon ({})",
                self.control_horizon, self.prediction_horizon
            ));
        }
        let weights = self
            .input_weights
            .iter()
            .chain(&self.rate_weights)
            .chain(&self.output_weights);
        if weights.clone().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("weights must be finite and non-negative".into());
        }
        if !(self.theta_max > 0.0) || !(self.slack_penalty > 0.0) {
            return bad("theta_max and slack_penalty must be positive".into());
        }
        if !(params.l_min..=params.l_max).contains(&self.l_ref) {
            return bad(format!("l_ref {} outside the leg range", self.l_ref));
        }
        Ok(())
    }
}

/// Upright rest state with the leg at `l`.
pub fn operating_state(params: &SystemParams, l: f64) -> State {
    State::upright(params, l)
}

/// Input that holds the upright rest state: tau = 0, and f_in found by a
/// safeguarded Newton iteration on the leg acceleration.
pub fn equilibrium_input(params: &SystemParams, l: f64) -> Result<ControlInput, MpcError> {
    params.validate()?;
    let state = operating_state(params, l);
    let ldd = |f: f64| -> Result<f64, MpcError> {
        Ok(accelerations(&state, &ControlInput::new(0.0, f), params)?.ldd)
    };
    let (mut lo, mut hi) = (-params.f_max, params.f_max);
    let (r_lo, r_hi) = (ldd(lo)?, ldd(hi)?);
    if r_lo.signum() == r_hi.signum() {
        return Err(MpcError::NoEquilibrium(format!(
            "leg residual keeps sign on [{lo}, {hi}]"
        )));
    }
    let rising = r_hi > r_lo;
    let mut f = 0.0;
    for _ in 0..200 {
        let r = ldd(f)?;
        if r.abs() <= 1e-13 {
            break;
        }
        if (r > 0.0) == rising {
            hi = f;
        } else {
            lo = f;
        }
        let h = 1e-6 * f.abs().max(1.0);
        let slope = (ldd(f + h)? - ldd(f - h)?) / (2.0 * h);
        let newton = f - r / slope;
        f = if slope != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let u = ControlInput::new(0.0, f);
    let residual = accelerations(&state, &u, params)?.norm();
    if residual > 1e-9 {
        return Err(MpcError::NoEquilibrium(format!("residual {residual:e}")));
    }
    Ok(u)
}

/// Continuous-time model `d(dx)/dt = A dx + B du`, `dy = C dx` about an
/// operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Rows select x and the linearized bob height.
    pub c: DMatrix<f64>,
    pub state: State,
    pub input: ControlInput,
    /// Outputs at the operating point.
    pub y0: [f64; OUTPUT_DIM],
}

/// Central-difference Jacobians of the full state derivative, step
/// `1e-6 * max(1, |v|)` per coordinate.
pub fn linearize(
    state: &State,
    input: &ControlInput,
    params: &SystemParams,
) -> Result<LinearModel, MpcError> {
    let x0 = state.to_array();
    let u0 = input.to_array();
    let f = |x: [f64; STATE_DIM], u: [f64; INPUT_DIM]| {
        state_derivative(&State::from_array(x), &ControlInput::from_slice(&u), params)
    };
    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for j in 0..STATE_DIM {
        let h = 1e-6 * x0[j].abs().max(1.0);
        let (mut xp, mut xm) = (x0, x0);
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(xp, u0)?, f(xm, u0)?);
        for i in 0..STATE_DIM {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut b = DMatrix::zeros(STATE_DIM, INPUT_DIM);
    for j in 0..INPUT_DIM {
        let h = 1e-6 * u0[j].abs().max(1.0);
        let (mut up, mut um) = (u0, u0);
        up[j] += h;
        um[j] -= h;
        let (fp, fm) = (f(x0, up)?, f(x0, um)?);
        for i in 0..STATE_DIM {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    for (m, offset) in [(&a, 0), (&b, STATE_DIM)] {
        if let Some(k) = m.iter().position(|v| !v.is_finite()) {
            return Err(MpcError::NonFiniteJacobian {
                row: k % STATE_DIM,
                col: offset + k / STATE_DIM,
            });
        }
    }
    // z_p = z + l cos(theta)
    let mut c = DMatrix::zeros(OUTPUT_DIM, STATE_DIM);
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    c[(1, THETA)] = -state.l * state.theta.sin();
    c[(1, 4)] = state.theta.cos();
    Ok(LinearModel {
        a,
        b,
        c,
        state: *state,
        input: *input,
        y0: [state.x, state.z + state.l * state.theta.cos()],
    })
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * sum.amax() * 1e-3 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Zero-order-hold discretization `(A_d, B_d)`, from the exponential of the
/// augmented matrix `[[A, B], [0, 0]] dt`.
pub fn discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = expm(&aug);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

/// Condensed prediction matrices for a fixed model and config. Only the
/// linear cost term and constraint bounds depend on the current state,
/// reference and previous input.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    config: SizedConfig,
    hessian: DMatrix<f64>,
    g: DMatrix<f64>,
    /// Stacked output deviation response to the initial state (2p x 10).
    phi_y: DMatrix<f64>,
    phi_theta: DMatrix<f64>,
    /// Maps output error (2p) to the move part of f.
    f_err: DMatrix<f64>,
    /// Maps previous input deviation (2) to the move part of f.
    f_prev: DMatrix<f64>,
    u_lo: [f64; INPUT_DIM],
    u_hi: [f64; INPUT_DIM],
    pub ad: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    model: LinearModel,
}

#[derive(Debug, Clone, Copy)]
struct SizedConfig {
    p: usize,
    m: usize,
    theta_max: f64,
}

impl CondensedQp {
    pub fn new(model: LinearModel, config: &MpcConfig, params: &SystemParams) -> Result<Self, MpcError> {
        config.validate(params)?;
        let (p, m) = (config.prediction_horizon, config.control_horizon);
        let (ad, bd) = discretize(&model.a, &model.b, config.sample_time);
        let nu = INPUT_DIM * m;

        // powers A_d^k and running sums S_q = sum_{r<=q} A_d^r B_d
        let mut powers = Vec::with_capacity(p + 1);
        powers.push(DMatrix::identity(STATE_DIM, STATE_DIM));
        for k in 1..=p {
            powers.push(&ad * &powers[k - 1]);
        }
        let mut sums = Vec::with_capacity(p);
        let mut acc = DMatrix::zeros(STATE_DIM, INPUT_DIM);
        for q in 0..p {
            acc += &powers[q] * &bd;
            sums.push(acc.clone());
        }

        let mut phi = DMatrix::zeros(STATE_DIM * p, STATE_DIM);
        let mut gamma = DMatrix::zeros(STATE_DIM * p, nu);
        for k in 1..=p {
            let row = STATE_DIM * (k - 1);
            phi.view_mut((row, 0), (STATE_DIM, STATE_DIM))
                .copy_from(&powers[k]);
            for j in 0..m.min(k) {
                let block = if j + 1 < m {
                    &powers[k - 1 - j] * &bd
                } else {
                    sums[k - m].clone()
                };
                gamma
                    .view_mut((row, INPUT_DIM * j), (STATE_DIM, INPUT_DIM))
                    .copy_from(&block);
            }
        }

        let mut phi_y = DMatrix::zeros(OUTPUT_DIM * p, STATE_DIM);
        let mut gamma_y = DMatrix::zeros(OUTPUT_DIM * p, nu);
        let mut phi_theta = DMatrix::zeros(p, STATE_DIM);
        let mut gamma_theta = DMatrix::zeros(p, nu);
        for k in 0..p {
            let rows = STATE_DIM * k;
            phi_y
                .view_mut((OUTPUT_DIM * k, 0), (OUTPUT_DIM, STATE_DIM))
                .copy_from(&(&model.c * phi.rows(rows, STATE_DIM)));
            gamma_y
                .view_mut((OUTPUT_DIM * k, 0), (OUTPUT_DIM, nu))
                .copy_from(&(&model.c * gamma.rows(rows, STATE_DIM)));
            phi_theta.row_mut(k).copy_from(&phi.row(rows + THETA));
            gamma_theta.row_mut(k).copy_from(&gamma.row(rows + THETA));
        }

        let sq = |w: f64| w * w;
        let q_diag = DVector::from_fn(OUTPUT_DIM * p, |i, _| sq(config.output_weights[i % OUTPUT_DIM]));
        // the last move is held for p - m + 1 steps
        let r_diag = DVector::from_fn(nu, |i, _| {
            let hold = if i / INPUT_DIM + 1 == m { (p - m + 1) as f64 } else { 1.0 };
            hold * sq(config.input_weights[i % INPUT_DIM])
        });
        let s_diag = DVector::from_fn(nu, |i, _| sq(config.rate_weights[i % INPUT_DIM]));
        // rate operator: (D U)_j = du_j - du_{j-1}
        let mut d = DMatrix::identity(nu, nu);
        for i in INPUT_DIM..nu {
            d[(i, i - INPUT_DIM)] = -1.0;
        }
        let qg = DMatrix::from_diagonal(&q_diag) * &gamma_y;
        let sd = DMatrix::from_diagonal(&s_diag) * &d;
        let h_moves = (gamma_y.transpose() * &qg + DMatrix::from_diagonal(&r_diag) + d.transpose() * &sd) * 2.0;
        let n = nu + 1;
        let mut hessian = DMatrix::zeros(n, n);
        hessian.view_mut((0, 0), (nu, nu)).copy_from(&h_moves);
        hessian[(nu, nu)] = 2.0 * config.slack_penalty;
        // exact symmetry
        hessian = (&hessian + hessian.transpose()) * 0.5;

        let f_err = qg.transpose() * 2.0;
        let mut e0 = DMatrix::zeros(nu, INPUT_DIM);
        e0.view_mut((0, 0), (INPUT_DIM, INPUT_DIM))
            .fill_with_identity();
        let f_prev = -(d.transpose() * DMatrix::from_diagonal(&s_diag) * e0) * 2.0;

        // rows: theta upper (p), theta lower (p), move upper (nu), move lower (nu), slack >= 0
        let rows = 2 * p + 2 * nu + 1;
        let mut g = DMatrix::zeros(rows, n);
        for k in 0..p {
            for c in 0..nu {
                g[(k, c)] = gamma_theta[(k, c)];
                g[(p + k, c)] = -gamma_theta[(k, c)];
            }
            g[(k, nu)] = -1.0;
            g[(p + k, nu)] = -1.0;
        }
        for i in 0..nu {
            g[(2 * p + i, i)] = 1.0;
            g[(2 * p + nu + i, i)] = -1.0;
        }
        g[(rows - 1, nu)] = -1.0;

        let limits = [params.tau_max, params.f_max];
        let u0 = model.input.to_array();
        Ok(Self {
            config: SizedConfig {
                p,
                m,
                theta_max: config.theta_max,
            },
            hessian,
            g,
            phi_y,
            phi_theta,
            f_err,
            f_prev,
            u_lo: [-limits[0] - u0[0], -limits[1] - u0[1]],
            u_hi: [limits[0] - u0[0], limits[1] - u0[1]],
            ad,
            bd,
            model,
        })
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn num_vars(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn prediction_horizon(&self) -> usize {
        self.config.p
    }

    pub fn control_horizon(&self) -> usize {
        self.config.m
    }

    /// Index of the slack variable in the decision vector.
    pub fn slack_index(&self) -> usize {
        INPUT_DIM * self.config.m
    }

    /// Deviation of `state` from the operating point. The plant is invariant
    /// in x and phi, so those enter relative to the operating values.
    pub fn deviation(&self, state: &State) -> DVector<f64> {
        let s = state.to_array();
        let o = self.model.state.to_array();
        DVector::from_fn(STATE_DIM, |i, _| s[i] - o[i])
    }

    /// QP over the stacked move deviations and the slack, for `reference`
    /// holding `(x_ref, z_ref)` at prediction steps 1..=p.
    pub fn problem(
        &self,
        state: &State,
        reference: &[(f64, f64)],
        prev_input: &ControlInput,
    ) -> Result<QpProblem, MpcError> {
        let p = self.config.p;
        if reference.len() < p {
            return Err(MpcError::ShortReference {
                need: p,
                got: reference.len(),
            });
        }
        let dx = self.deviation(state);
        let mut err = &self.phi_y * &dx;
        for k in 0..p {
            err[OUTPUT_DIM * k] += self.model.y0[0] - reference[k].0;
            err[OUTPUT_DIM * k + 1] += self.model.y0[1] - reference[k].1;
        }
        let u0 = self.model.input.to_array();
        let prev = prev_input.to_array();
        let du_prev = DVector::from_fn(INPUT_DIM, |i, _| prev[i] - u0[i]);
        let nu = INPUT_DIM * self.config.m;
        let mut f = DVector::zeros(nu + 1);
        f.rows_mut(0, nu)
            .copy_from(&(&self.f_err * err + &self.f_prev * du_prev));

        let theta0 = self.model.state.theta;
        let free = &self.phi_theta * &dx;
        let mut h = DVector::zeros(self.g.nrows());
        for k in 0..p {
            h[k] = self.config.theta_max - theta0 - free[k];
            h[p + k] = self.config.theta_max + theta0 + free[k];
        }
        for i in 0..nu {
            h[2 * p + i] = self.u_hi[i % INPUT_DIM];
            h[2 * p + nu + i] = -self.u_lo[i % INPUT_DIM];
        }
        Ok(QpProblem::new(self.hessian.clone(), f, self.g.clone(), h)?)
    }

    /// Map an active set to the one expected a step later: prediction rows
    /// and move rows move one step earlier.
    fn shift_active(&self, active: &[usize]) -> Vec<usize> {
        let (p, nu) = (self.config.p, INPUT_DIM * self.config.m);
        let mut out = Vec::with_capacity(active.len());
        for &i in active {
            let shifted = if i < 2 * p {
                let (base, k) = (i / p * p, i % p);
                (k > 0).then(|| base + k - 1)
            } else if i < 2 * p + 2 * nu {
                let base = 2 * p + (i - 2 * p) / nu * nu;
                let j = i - base;
                (j >= INPUT_DIM).then(|| i - INPUT_DIM)
            } else {
                Some(i)
            };
            out.extend(shifted);
        }
        // the held last move keeps its bound
        out.extend(active.iter().copied().filter(|&i| {
            i >= 2 * p && i < 2 * p + 2 * nu && (i - 2 * p) % nu >= nu - INPUT_DIM
        }));
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MpcStep {
    /// The QP failed and the previous input was repeated.
    pub fallback: bool,
    pub error: Option<String>,
    pub iterations: usize,
    pub warm_started: bool,
    pub slack: f64,
    pub active_constraints: usize,
    pub kkt: KktResiduals,
}

/// Receding-horizon controller with full state feedback.
#[derive(Debug, Clone)]
pub struct MpcController {
    params: SystemParams,
    config: MpcConfig,
    qp: CondensedQp,
    solver: ActiveSetSolver,
    prev_input: ControlInput,
    prev_active: Option<Vec<usize>>,
    last: MpcStep,
}

impl MpcController {
    /// Linearize at the upright rest state with the leg at `config.l_ref`.
    pub fn new(params: SystemParams, config: MpcConfig) -> Result<Self, MpcError> {
        config.validate(&params)?;
        let state = operating_state(&params, config.l_ref);
        let input = equilibrium_input(&params, config.l_ref)?;
        let model = linearize(&state, &input, &params)?;
        Self::from_model(params, config, model)
    }

    pub fn from_model(params: SystemParams, config: MpcConfig, model: LinearModel) -> Result<Self, MpcError> {
        let qp = CondensedQp::new(model, &config, &params)?;
        let solver = ActiveSetSolver::new(qp.hessian())?;
        let prev_input = qp.model().input;
        Ok(Self {
            params,
            config,
            qp,
            solver,
            prev_input,
            prev_active: None,
            last: MpcStep::default(),
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn model(&self) -> &LinearModel {
        self.qp.model()
    }

    pub fn condensed(&self) -> &CondensedQp {
        &self.qp
    }

    pub fn equilibrium(&self) -> ControlInput {
        self.qp.model().input
    }

    pub fn last_step(&self) -> &MpcStep {
        &self.last
    }

    pub fn previous_input(&self) -> ControlInput {
        self.prev_input
    }

    /// Forget the previous input and warm-start data.
    pub fn reset(&mut self) {
        self.prev_input = self.equilibrium();
        self.prev_active = None;
        self.last = MpcStep::default();
    }

    /// Solve the current QP, optionally warm-started.
    pub fn solve(
        &self,
        state: &State,
        reference: &[(f64, f64)],
        warm: Option<&[usize]>,
    ) -> Result<(QpProblem, QpSolution), MpcError> {
        let problem = self.qp.problem(state, reference, &self.prev_input)?;
        let solution = self.solver.solve(&problem, warm)?;
        Ok((problem, solution))
    }

    /// First optimal move plus the equilibrium input, saturated. If the QP
    /// fails the previous input is repeated and [`MpcStep::fallback`] is set.
    pub fn control(&mut self, state: &State, reference: &[(f64, f64)]) -> Result<ControlInput, MpcError> {
        if !state.is_finite() {
            return Err(MpcError::NonFiniteState);
        }
        // previous active set as is, then shifted one step
        let mut candidates = Vec::new();
        if let Some(prev) = &self.prev_active {
            candidates.push(prev.clone());
            candidates.push(self.qp.shift_active(prev));
        }
        let refs: Vec<&[usize]> = candidates.iter().map(Vec::as_slice).collect();
        let solved = self
            .qp
            .problem(state, reference, &self.prev_input)
            .and_then(|qp| Ok(self.solver.solve_candidates(&qp, &refs)?));
        match solved {
            Ok(sol) => {
                let u0 = self.equilibrium();
                let u = ControlInput::new(u0.tau + sol.x[0], u0.f_in + sol.x[1]).clamped(&self.params);
                self.last = MpcStep {
                    fallback: false,
                    error: None,
                    iterations: sol.iterations,
                    warm_started: sol.warm_started,
                    slack: sol.x[self.qp.slack_index()],
                    active_constraints: sol.active.len(),
                    kkt: sol.kkt,
                };
                self.prev_active = Some(sol.active);
                self.prev_input = u;
                Ok(u)
            }
            Err(MpcError::Qp(e)) => {
                self.last = MpcStep {
                    fallback: true,
                    error: Some(e.to_string()),
                    ..MpcStep::default()
                };
                self.prev_active = None;
                Ok(self.prev_input)
            }
            Err(e) => Err(e),
        }
    }
}
