//! Nonlinear equations of motion for the extendable wheeled inverted pendulum.
//!
//! The plant is a single wheel carrying a prismatic link with a point-mass bob.
//! Generalized coordinates are `(x, z, theta, phi, l)`: wheel position, wheel
//! height, link angle from the vertical, wheel rotation and link length.
//!
//! The closed-form accelerations are evaluated literally. Ground contact keeps
//! the wheel at `z = R_w`; the normal force is whatever makes the vertical
//! acceleration vanish.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
    #[error("integration produced a non-finite state: {state:?}")]
    IntegrationBlowup { state: State },
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
}

/// Physical constants and actuator limits of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemParams {
    /// Wheel mass (kg).
    pub m_w: f64,
    /// Bob mass (kg).
    pub m_p: f64,
    /// Wheel radius (m).
    pub r_w: f64,
    /// Wheel moment of inertia (kg m^2).
    pub inertia: f64,
    pub g: f64,
    pub l_min: f64,
    pub l_max: f64,
    /// Ground friction coefficient. Not used by the equations of motion.
    pub mu: f64,
    pub tau_max: f64,
    pub f_max: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        let m_w = 0.25;
        let r_w = 0.1;
        Self {
            m_w,
            m_p: 0.125,
            r_w,
            // uniform disc
            inertia: 0.5 * m_w * r_w * r_w,
            g: 9.81,
            l_min: 0.25,
            l_max: 0.5,
            mu: 0.6,
            tau_max: 5.0,
            f_max: 20.0,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("m_w", self.m_w),
            ("m_p", self.m_p),
            ("r_w", self.r_w),
            ("inertia", self.inertia),
            ("tau_max", self.tau_max),
            ("f_max", self.f_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if !(self.g.is_finite()) {
            return Err(DynamicsError::InvalidParams("g must be finite".into()));
        }
        if !(self.l_min > 0.0 && self.l_min < self.l_max && self.l_max.is_finite()) {
            return Err(DynamicsError::InvalidParams(format!(
                "link limits must satisfy 0 < l_min < l_max, got [{}, {}]",
                self.l_min, self.l_max
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(DynamicsError::InvalidParams(format!(
                "mu must lie in [0, 1], got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// Generalized coordinates and their rates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub z: f64,
    pub theta: f64,
    pub phi: f64,
    pub l: f64,
    pub xd: f64,
    pub zd: f64,
    pub thetad: f64,
    pub phid: f64,
    pub ld: f64,
}

pub const STATE_DIM: usize = 10;

impl State {
    /// Upright, motionless, wheel on the ground.
    pub fn upright(params: &SystemParams, l: f64) -> Self {
        Self {
            z: params.r_w,
            l,
            ..Self::default()
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.x, self.z, self.theta, self.phi, self.l, self.xd, self.zd, self.thetad,
            self.phid, self.ld,
        ]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self {
            x: a[0],
            z: a[1],
            theta: a[2],
            phi: a[3],
            l: a[4],
            xd: a[5],
            zd: a[6],
            thetad: a[7],
            phid: a[8],
            ld: a[9],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Wheel torque and link force.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub tau: f64,
    pub f_in: f64,
}

impl ControlInput {
    pub fn new(tau: f64, f_in: f64) -> Self {
        Self { tau, f_in }
    }

    /// Saturate at the actuator limits. NaN maps to zero.
    pub fn clamped(&self, params: &SystemParams) -> Self {
        let sat = |v: f64, lim: f64| if v.is_nan() { 0.0 } else { v.clamp(-lim, lim) };
        Self {
            tau: sat(self.tau, params.tau_max),
            f_in: sat(self.f_in, params.f_max),
        }
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.tau, self.f_in]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self {
            tau: a[0],
            f_in: a[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accelerations {
    pub xdd: f64,
    pub zdd: f64,
    pub thetadd: f64,
    pub phidd: f64,
    pub ldd: f64,
}

impl Accelerations {
    pub fn to_array(&self) -> [f64; 5] {
        [self.xdd, self.zdd, self.thetadd, self.phidd, self.ldd]
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energies {
    pub kinetic: f64,
    pub potential: f64,
}

/// Position of the bob, `(x_p, z_p)`.
pub fn bob_position(state: &State) -> (f64, f64) {
    let (s, c) = state.theta.sin_cos();
    (state.x + state.l * s, state.z + state.l * c)
}

/// Bob velocity, the time derivative of [`bob_position`].
pub fn bob_velocity(state: &State) -> (f64, f64) {
    let (s, c) = state.theta.sin_cos();
    (
        state.xd + state.ld * s + state.l * c * state.thetad,
        state.zd + state.ld * c - state.l * s * state.thetad,
    )
}

pub fn energies(state: &State, params: &SystemParams) -> Energies {
    let (xpd, zpd) = bob_velocity(state);
    let (_, zp) = bob_position(state);
    let kinetic = 0.5 * params.m_w * (state.xd * state.xd + state.zd * state.zd)
        + 0.5 * params.m_p * (xpd * xpd + zpd * zpd)
        + 0.5 * params.inertia * state.phid * state.phid;
    let potential = params.m_w * params.g * state.z + params.m_p * params.g * zp;
    Energies {
        kinetic,
        potential,
    }
}

/// Ground reaction that holds the wheel on flat ground (vertical acceleration zero).
pub fn normal_force(
    state: &State,
    input: &ControlInput,
    params: &SystemParams,
) -> Result<f64, DynamicsError> {
    if state.l == 0.0 {
        return Err(DynamicsError::DegenerateGeometry("link length is zero"));
    }
    let SystemParams { m_w, m_p, g, .. } = *params;
    Ok(m_w * (g * m_p / m_w + input.tau * state.theta.sin() / (m_w * state.l) + 2.0 * g))
}

/// Second derivatives of the generalized coordinates.
pub fn accelerations(
    state: &State,
    input: &ControlInput,
    params: &SystemParams,
) -> Result<Accelerations, DynamicsError> {
    if params.inertia == 0.0 {
        return Err(DynamicsError::DegenerateGeometry("wheel inertia is zero"));
    }
    let n = normal_force(state, input, params)?;
    let SystemParams {
        m_w,
        m_p,
        r_w,
        inertia: i,
        g,
        ..
    } = *params;
    let State {
        theta,
        l,
        thetad,
        ld,
        ..
    } = *state;
    let tau = input.tau;
    let f_in = input.f_in;
    let (s, c) = theta.sin_cos();

    let xdd = tau * (i * c + r_w * l) / (i * m_w * l);
    let thetadd = (-i * m_p * m_w * (g * s + 2.0 * ld * thetad) * l
        + i * m_p * (-g * m_p + n) * l * s
        - i * m_p * tau
        - i * m_w * tau
        - r_w * m_p * l * tau * c)
        / (i * m_p * m_w * l * l);
    let phidd = tau / i;
    let ldd = g * m_p * c / m_w + g * c + l * thetad * thetad - n * c / m_w + f_in
        - r_w * tau * s / (i * m_w);

    Ok(Accelerations {
        xdd,
        // ground contact: N was chosen to cancel this
        zdd: 0.0,
        thetadd,
        phidd,
        ldd,
    })
}

/// Full first-order state derivative `(q_dot, q_ddot)`.
pub fn state_derivative(
    state: &State,
    input: &ControlInput,
    params: &SystemParams,
) -> Result<[f64; STATE_DIM], DynamicsError> {
    let a = accelerations(state, input, params)?;
    Ok([
        state.xd, state.zd, state.thetad, state.phid, state.ld, a.xdd, a.zdd, a.thetadd, a.phidd,
        a.ldd,
    ])
}

/// One classical Runge-Kutta step without any constraint projection.
pub fn rk4_step(
    state: &State,
    input: &ControlInput,
    params: &SystemParams,
    dt: f64,
) -> Result<State, DynamicsError> {
    let y0 = state.to_array();
    let offset = |k: &[f64; STATE_DIM], h: f64| {
        let mut y = y0;
        for (yi, ki) in y.iter_mut().zip(k) {
            *yi += h * ki;
        }
        State::from_array(y)
    };
    let k1 = state_derivative(state, input, params)?;
    let k2 = state_derivative(&offset(&k1, 0.5 * dt), input, params)?;
    let k3 = state_derivative(&offset(&k2, 0.5 * dt), input, params)?;
    let k4 = state_derivative(&offset(&k3, dt), input, params)?;
    let mut y = y0;
    for i in 0..STATE_DIM {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(State::from_array(y))
}

/// Advance the plant by `dt`, then enforce ground contact and the link travel limits.
pub fn step(
    state: &State,
    input: &ControlInput,
    params: &SystemParams,
    dt: f64,
) -> Result<State, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    let mut next = rk4_step(state, input, params, dt)?;
    if !next.is_finite() {
        return Err(DynamicsError::IntegrationBlowup { state: next });
    }
    next.z = params.r_w;
    next.zd = 0.0;
    if next.l <= params.l_min {
        next.l = params.l_min;
        next.ld = 0.0;
    } else if next.l >= params.l_max {
        next.l = params.l_max;
        next.ld = 0.0;
    }
    Ok(next)
}

/// Apply [`step`] `substeps` times with a constant input.
pub fn integrate(
    state: &State,
    input: &ControlInput,
    params: &SystemParams,
    dt: f64,
    substeps: usize,
) -> Result<State, DynamicsError> {
    let mut s = *state;
    for _ in 0..substeps {
        s = step(&s, input, params, dt)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn params() -> SystemParams {
        SystemParams::default()
    }

    #[test]
    fn default_params_are_valid() {
        let p = params();
        p.validate().unwrap();
        assert!((p.inertia - 0.00125).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = params();
        p.l_min = 0.6;
        assert!(p.validate().is_err());
        let mut p = params();
        p.mu = 1.5;
        assert!(p.validate().is_err());
        let mut p = params();
        p.m_w = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn bob_position_cases() {
        let s = State {
            z: 0.1,
            l: 0.375,
            ..State::default()
        };
        let (xp, zp) = bob_position(&s);
        assert_eq!(xp, 0.0);
        assert!((zp - 0.475).abs() < 1e-15);

        let s = State {
            x: 1.0,
            z: 0.1,
            theta: PI / 2.0,
            l: 0.25,
            ..State::default()
        };
        let (xp, zp) = bob_position(&s);
        assert!((xp - 1.25).abs() < 1e-15);
        assert!((zp - 0.1).abs() < 1e-15);

        let s = State {
            z: 0.1,
            theta: PI / 6.0,
            l: 0.5,
            ..State::default()
        };
        let (xp, zp) = bob_position(&s);
        assert!((xp - 0.25).abs() < 1e-15);
        assert!((zp - (0.1 + 0.25 * 3f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn energies_at_rest() {
        let p = params();
        let s = State {
            z: 0.1,
            l: 0.375,
            ..State::default()
        };
        let e = energies(&s, &p);
        assert_eq!(e.kinetic, 0.0);
        // 0.25*9.81*0.1 + 0.125*9.81*0.475
        assert!((e.potential - 0.82771875).abs() < 1e-12);

        let s = State {
            l: 0.375,
            ..State::default()
        };
        let e = energies(&s, &p);
        assert!((e.potential - p.m_p * p.g * 0.375).abs() < 1e-15);
    }

    #[test]
    fn kinetic_energy_of_pure_translation() {
        let p = params();
        let s = State {
            z: 0.1,
            l: 0.375,
            xd: 1.0,
            ..State::default()
        };
        let e = energies(&s, &p);
        assert!((e.kinetic - 0.5 * (p.m_w + p.m_p)).abs() < 1e-15);
    }

    #[test]
    fn normal_force_cases() {
        let p = params();
        let mut s = State::upright(&p, 0.375);
        let n = normal_force(&s, &ControlInput::default(), &p).unwrap();
        assert!((n - (p.g * p.m_p + 2.0 * p.g * p.m_w)).abs() < 1e-12);

        s.theta = 0.7;
        let n2 = normal_force(&s, &ControlInput::default(), &p).unwrap();
        assert_eq!(n, n2);

        s.theta = PI / 2.0;
        let n3 = normal_force(&s, &ControlInput::new(0.001, 0.0), &p).unwrap();
        let expected = 9.81 * 0.125 + 2.0 * 9.81 * 0.25 + 0.001 / 0.375;
        assert!((n3 - expected).abs() < 1e-12);

        s.l = 0.0;
        assert!(matches!(
            normal_force(&s, &ControlInput::default(), &p),
            Err(DynamicsError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn accelerations_simple_cases() {
        let p = params();
        let s = State::upright(&p, 0.375);
        let a = accelerations(&s, &ControlInput::default(), &p).unwrap();
        assert_eq!(a.phidd, 0.0);
        assert_eq!(a.xdd, 0.0);
        assert_eq!(a.thetadd, 0.0);

        let a = accelerations(&s, &ControlInput::new(p.inertia, 0.0), &p).unwrap();
        assert!((a.phidd - 1.0).abs() < 1e-15);

        let mut p0 = p;
        p0.inertia = 0.0;
        assert!(accelerations(&s, &ControlInput::default(), &p0).is_err());
    }

    #[test]
    fn tilted_without_torque() {
        // With tau = 0 the angular equation reduces to
        // -g sin(th)/l + (N - g m_p) sin(th)/(m_w l) = g sin(th)/l.
        let p = params();
        let mut s = State::upright(&p, 0.375);
        s.theta = 0.1;
        let a = accelerations(&s, &ControlInput::default(), &p).unwrap();
        let expected = p.g * 0.1f64.sin() / 0.375;
        assert!((a.thetadd - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn torque_only_step_is_exact() {
        let p = params();
        let s = State::upright(&p, 0.375);
        let next = step(&s, &ControlInput::new(p.inertia, 0.0), &p, 0.01).unwrap();
        assert!((next.phid - 0.01).abs() < 1e-9);
        assert!((next.phi - 0.5 * 0.01 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let p = params();
        let s = State::upright(&p, 0.375);
        // theta = 0, tau = 0: link force g balances the link equation
        let u = ControlInput::new(0.0, p.g);
        let next = integrate(&s, &u, &p, 0.002, 50).unwrap();
        for (a, b) in next.to_array().iter().zip(s.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn link_limit_is_inelastic() {
        let p = params();
        let mut s = State::upright(&p, p.l_max - 1e-4);
        s.ld = 1.0;
        let next = step(&s, &ControlInput::new(0.0, p.g), &p, 0.002).unwrap();
        assert_eq!(next.l, p.l_max);
        assert_eq!(next.ld, 0.0);

        let s = State::upright(&p, p.l_min);
        let next = step(&s, &ControlInput::default(), &p, 0.002).unwrap();
        assert_eq!(next.l, p.l_min);
        assert_eq!(next.ld, 0.0);
    }

    #[test]
    fn ground_contact_is_held() {
        let p = params();
        let mut s = State::upright(&p, 0.375);
        s.theta = 0.2;
        s.thetad = -0.3;
        let next = integrate(&s, &ControlInput::new(0.01, 9.0), &p, 0.002, 20).unwrap();
        assert_eq!(next.z, p.r_w);
        assert_eq!(next.zd, 0.0);
    }

    #[test]
    fn rejects_bad_dt() {
        let p = params();
        let s = State::upright(&p, 0.375);
        assert!(matches!(
            step(&s, &ControlInput::default(), &p, 0.0),
            Err(DynamicsError::InvalidTimeStep(_))
        ));
    }

    #[test]
    fn blowup_is_reported() {
        let p = params();
        let mut s = State::upright(&p, 0.375);
        s.thetad = f64::INFINITY;
        assert!(matches!(
            step(&s, &ControlInput::default(), &p, 0.002),
            Err(DynamicsError::IntegrationBlowup { .. })
        ));
    }

    #[test]
    fn clamp_saturates() {
        let p = params();
        let u = ControlInput::new(12.0, -100.0).clamped(&p);
        assert_eq!(u, ControlInput::new(5.0, -20.0));
    }
}
