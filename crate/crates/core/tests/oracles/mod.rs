//! Independent reference implementations used only by tests.
//!
//! Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use ewip_core::dynamics::{ControlInput, State, SystemParams};

/// Accelerations written out term by term with the normal force substituted
/// symbolically, returned as `[xdd, zdd, thetadd, phidd, ldd]`.
pub fn symbolic_accelerations(s: &State, u: &ControlInput, p: &SystemParams) -> [f64; 5] {
    let (sin, cos) = (s.theta.sin(), s.theta.cos());
    let tau = u.tau;
    let l = s.l;
    // N - g m_p after closing the vertical equation with zdd = 0
    let n_minus_gmp = 2.0 * p.g * p.m_w + tau * sin / l;
    let n_over_mw = p.g * p.m_p / p.m_w + 2.0 * p.g + tau * sin / (p.m_w * l);

    let xdd = tau * cos / (p.m_w * l) + tau * p.r_w / (p.inertia * p.m_w);
    let thetadd = -(p.g * sin + 2.0 * s.ld * s.thetad) / l + n_minus_gmp * sin / (p.m_w * l)
        - tau / (p.m_w * l * l)
        - tau / (p.m_p * l * l)
        - p.r_w * tau * cos / (p.inertia * p.m_w * l);
    let phidd = tau / p.inertia;
    let ldd = cos * (p.g * p.m_p / p.m_w + p.g - n_over_mw) + l * s.thetad * s.thetad + u.f_in
        - p.r_w * tau * sin / (p.inertia * p.m_w);
    [xdd, 0.0, thetadd, phidd, ldd]
}

/// Symmetric positive definite matrix solve by Gaussian elimination with
/// partial pivoting on plain vectors. Returns None if singular.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-13 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = rhs[r];
        for c in r + 1..n {
            acc -= m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    Some(x)
}

/// Solve `min 1/2 x'Hx + f'x  s.t.  G x <= h` by trying every subset of
/// constraints as the active set and keeping the KKT point.
pub fn enumerate_qp(h: &[Vec<f64>], f: &[f64], g: &[Vec<f64>], hv: &[f64]) -> Option<Vec<f64>> {
    let n = f.len();
    let m = hv.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = active.len();
        if k > n {
            continue;
        }
        // [H G_A'; G_A 0] [x; lam] = [-f; h_A]
        let dim = n + k;
        let mut kkt = vec![vec![0.0; dim]; dim];
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                kkt[i][j] = h[i][j];
            }
            rhs[i] = -f[i];
        }
        for (a, &ci) in active.iter().enumerate() {
            for j in 0..n {
                kkt[j][n + a] = g[ci][j];
                kkt[n + a][j] = g[ci][j];
            }
            rhs[n + a] = hv[ci];
        }
        let Some(sol) = dense_solve(&kkt, &rhs) else {
            continue;
        };
        let x = &sol[..n];
        let lam = &sol[n..];
        if lam.iter().any(|&l| l < -1e-9) {
            continue;
        }
        let feasible = (0..m).all(|i| {
            let gx: f64 = (0..n).map(|j| g[i][j] * x[j]).sum();
            gx <= hv[i] + 1e-9
        });
        if !feasible {
            continue;
        }
        let cost = qp_cost(h, f, x);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, x.to_vec()));
        }
    }
    best.map(|(_, x)| x)
}

pub fn qp_cost(h: &[Vec<f64>], f: &[f64], x: &[f64]) -> f64 {
    let n = f.len();
    let mut c = 0.0;
    for i in 0..n {
        for j in 0..n {
            c += 0.5 * x[i] * h[i][j] * x[j];
        }
        c += f[i] * x[i];
    }
    c
}

/// Advantage by direct summation over the remaining horizon:
/// `-V(s_t) + sum_k gamma^(k-t) r_k + gamma^(T-t) V(s_T)`.
pub fn direct_advantages(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let horizon = rewards.len();
    (0..horizon)
        .map(|t| {
            let mut acc = -values[t];
            for k in t..horizon {
                acc += gamma.powi((k - t) as i32) * rewards[k];
            }
            acc + gamma.powi((horizon - t) as i32) * bootstrap
        })
        .collect()
}

/// Central finite difference of a scalar function w.r.t. each coordinate.
pub fn central_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let fp = f(&work);
            work[i] = orig - step;
            let fm = f(&work);
            work[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Relative error used by gradient checks: |a-b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
