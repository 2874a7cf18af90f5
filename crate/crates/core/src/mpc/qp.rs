//! Dense strictly convex QP, `min 0.5 x'Hx + f'x  s.t.  Gx <= h`, solved by
//! the Goldfarb-Idnani dual active-set method.
//!
//! The solver starts from the unconstrained minimum and adds the most
//! violated constraint at each outer step, dropping constraints whose
//! multipliers would turn negative. The Hessian inverse is formed once, so a
//! solver can be reused across problems that share `H`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Added to the Hessian diagonal when it is not numerically positive definite.
pub const REGULARIZATION: f64 = 1e-9;

const FEAS_TOL: f64 = 1e-11;
const DUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not positive definite even after regularization")]
    NotConvex,
    #[error("QP infeasible: constraint {constraint} violated by {violation:e}")]
    Infeasible { constraint: usize, violation: f64 },
    #[error("active-set iteration cap of {0} reached")]
    IterationCap(usize),
    #[error("non-finite QP data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `max |Hx + f + G'lambda|`.
    pub stationarity: f64,
    /// `max(0, max(Gx - h))`.
    pub primal: f64,
    /// `max(0, -min lambda)`.
    pub dual: f64,
    /// `max |lambda_i (Gx - h)_i|`.
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row, zero off the active set.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    /// The supplied active set was already optimal.
    pub warm_started: bool,
    pub kkt: KktResiduals,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        f: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, QpError> {
        let qp = Self { hessian, f, g, h };
        qp.check()?;
        Ok(qp)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.f.len();
        if self.hessian.shape() != (n, n) {
            return Err(QpError::Dimension(format!(
                "Hessian is {:?}, expected {n}x{n}",
                self.hessian.shape()
            )));
        }
        if self.g.ncols() != n || self.g.nrows() != self.h.len() {
            return Err(QpError::Dimension(format!(
                "constraints {:?} against {} bounds and {n} variables",
                self.g.shape(),
                self.h.len()
            )));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !(finite(self.hessian.as_slice())
            && finite(self.f.as_slice())
            && finite(self.g.as_slice())
            && finite(self.h.as_slice()))
        {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.h.len()
    }

    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.f.dot(x)
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (&self.g * x - &self.h).iter().fold(0.0f64, |m, &v| m.max(v))
    }

    pub fn kkt(&self, x: &DVector<f64>, multipliers: &DVector<f64>) -> KktResiduals {
        let grad = &self.hessian * x + &self.f + self.g.transpose() * multipliers;
        let slack = &self.g * x - &self.h;
        KktResiduals {
            stationarity: grad.amax(),
            primal: slack.iter().fold(0.0f64, |m, &v| m.max(v)),
            dual: multipliers.iter().fold(0.0f64, |m, &v| m.max(-v)),
            complementarity: multipliers
                .iter()
                .zip(slack.iter())
                .fold(0.0f64, |m, (l, s)| m.max((l * s).abs())),
        }
    }

    pub fn solve(&self, warm: Option<&[usize]>) -> Result<QpSolution, QpError> {
        self.check()?;
        ActiveSetSolver::new(&self.hessian)?.solve(self, warm)
    }
}

/// Goldfarb-Idnani solver bound to one Hessian.
#[derive(Debug, Clone)]
pub struct ActiveSetSolver {
    hessian: DMatrix<f64>,
    hinv: DMatrix<f64>,
    regularized: bool,
}

impl ActiveSetSolver {
    pub fn new(hessian: &DMatrix<f64>) -> Result<Self, QpError> {
        if !hessian.is_square() {
            return Err(QpError::Dimension("Hessian must be square".into()));
        }
        let (chol, regularized) = match Cholesky::new(hessian.clone()) {
            Some(c) => (c, false),
            None => {
                let n = hessian.nrows();
                let shifted = hessian + DMatrix::identity(n, n) * REGULARIZATION;
                (Cholesky::new(shifted).ok_or(QpError::NotConvex)?, true)
            }
        };
        Ok(Self {
            hessian: hessian.clone(),
            hinv: chol.inverse(),
            regularized,
        })
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// Solve `qp`, whose Hessian must be the one this solver was built for.
    /// `warm` is a guess of the optimal active set; it is used only if it
    /// satisfies the KKT conditions exactly, so the answer does not depend
    /// on it beyond rounding.
    pub fn solve(&self, qp: &QpProblem, warm: Option<&[usize]>) -> Result<QpSolution, QpError> {
        qp.check()?;
        if qp.num_vars() != self.hinv.nrows() {
            return Err(QpError::Dimension("problem and solver sizes differ".into()));
        }
        match warm {
            Some(set) => self.solve_candidates(qp, &[set]),
            None => self.solve_candidates(qp, &[]),
        }
    }

    /// Like [`ActiveSetSolver::solve`], trying several active-set guesses in
    /// order before a cold solve.
    pub fn solve_candidates(&self, qp: &QpProblem, candidates: &[&[usize]]) -> Result<QpSolution, QpError> {
        qp.check()?;
        if qp.num_vars() != self.hinv.nrows() {
            return Err(QpError::Dimension("problem and solver sizes differ".into()));
        }
        for set in candidates {
            if let Some(sol) = self.try_active_set(qp, set) {
                return Ok(sol);
            }
        }
        self.solve_cold(qp)
    }

    /// Equality-constrained solve on `set`; accepted only if primal and dual
    /// feasible.
    fn try_active_set(&self, qp: &QpProblem, set: &[usize]) -> Option<QpSolution> {
        let m = qp.num_constraints();
        let mut set: Vec<usize> = set.iter().copied().filter(|&i| i < m).collect();
        set.sort_unstable();
        set.dedup();
        if set.len() > qp.num_vars() {
            return None;
        }
        let x0 = -(&self.hinv * &qp.f);
        let (x, lambda) = if set.is_empty() {
            (x0, DVector::zeros(0))
        } else {
            let gw = qp.g.select_rows(set.iter());
            let hw = DVector::from_iterator(set.len(), set.iter().map(|&i| qp.h[i]));
            let hinv_gt = &self.hinv * gw.transpose();
            let schur = &gw * &hinv_gt;
            let rhs = -(hw - &gw * &x0);
            let lambda = Cholesky::new(schur)?.solve(&rhs);
            (x0 - hinv_gt * &lambda, lambda)
        };
        if lambda.iter().any(|&l| !(l >= -DUAL_TOL)) || !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        if qp.max_violation(&x) > FEAS_TOL {
            return None;
        }
        let mut multipliers = DVector::zeros(m);
        for (&i, &l) in set.iter().zip(lambda.iter()) {
            multipliers[i] = l.max(0.0);
        }
        Some(QpSolution {
            kkt: qp.kkt(&x, &multipliers),
            x,
            multipliers,
            active: set,
            iterations: 0,
            warm_started: true,
        })
    }

    fn solve_cold(&self, qp: &QpProblem) -> Result<QpSolution, QpError> {
        let n = qp.num_vars();
        let cap = 10 * n.max(1);
        let mut x = -(&self.hinv * &qp.f);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut iterations = 0;

        // each row as a ">=" normal: n_i = -g_i, slack s_i = h_i - g_i x
        let slack = |x: &DVector<f64>, i: usize| qp.h[i] - qp.g.row(i).dot(&x.transpose());

        loop {
            let s = &qp.h - &qp.g * &x;
            let Some((p, &sp)) = s
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
            else {
                break;
            };
            if sp >= -FEAS_TOL {
                break;
            }
            let np: DVector<f64> = -qp.g.row(p).transpose();
            let hinv_np = &self.hinv * &np;
            let np_scale = np.dot(&hinv_np);
            let mut u_p = 0.0;
            loop {
                iterations += 1;
                if iterations > cap {
                    return Err(QpError::IterationCap(cap));
                }
                // z = H^-1 (I - N N*) n_p,  r = N* n_p,  N* = (N'H^-1 N)^-1 N'H^-1
                let (z, r) = if active.is_empty() {
                    (hinv_np.clone(), DVector::zeros(0))
                } else {
                    let nmat: DMatrix<f64> = -qp.g.select_rows(active.iter()).transpose();
                    let hinv_n = &self.hinv * &nmat;
                    let m = nmat.transpose() * &hinv_n;
                    let rhs = nmat.transpose() * &hinv_np;
                    let r = solve_spd(m, &rhs).ok_or(QpError::NotConvex)?;
                    (&hinv_np - hinv_n * &r, r)
                };

                let r_max = r.amax();
                let mut t1 = f64::INFINITY;
                let mut block = None;
                for (j, (&rj, &uj)) in r.iter().zip(&u).enumerate() {
                    if rj > 1e-12 * r_max {
                        let t = uj / rj;
                        if t < t1 {
                            t1 = t;
                            block = Some(j);
                        }
                    }
                }
                let znp = z.dot(&np);
                let t2 = if znp > 1e-12 * np_scale {
                    -slack(&x, p) / znp
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if t.is_infinite() {
                    return Err(QpError::Infeasible {
                        constraint: p,
                        violation: -slack(&x, p),
                    });
                }
                for (uj, rj) in u.iter_mut().zip(r.iter()) {
                    *uj -= t * rj;
                }
                u_p += t;
                if t2.is_finite() {
                    x += &z * t;
                }
                if t2 <= t1 {
                    active.push(p);
                    u.push(u_p);
                    break;
                }
                let k = block.expect("t1 finite implies a blocking constraint");
                active.remove(k);
                u.remove(k);
            }
        }

        let mut multipliers = DVector::zeros(qp.num_constraints());
        for (&i, &l) in active.iter().zip(&u) {
            multipliers[i] = l.max(0.0);
        }
        Ok(QpSolution {
            kkt: qp.kkt(&x, &multipliers),
            x,
            multipliers,
            active,
            iterations,
            warm_started: false,
        })
    }
}

fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    match Cholesky::<f64, Dyn>::new(m.clone()) {
        Some(c) => Some(c.solve(rhs)),
        None => m.lu().solve(rhs),
    }
}
