//! Controller-agnostic episode metrics computed from a trace.

use serde::{Deserialize, Serialize};

use crate::error::BenchError;
use crate::trace::TraceRow;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Root-mean-square of `e_x` over the trace (m).
    pub rmse_x: f64,
    /// |x - x_ref| at the last row (m).
    pub final_error: f64,
    /// max |theta| (rad).
    pub max_theta: f64,
    /// max |xd| (m/s).
    pub max_xd: f64,
    /// Trapezoid integral of |power| over the trace (J).
    pub energy: f64,
    /// Sum of step rewards.
    pub episode_return: f64,
    /// The episode ended by falling.
    pub failed: bool,
    pub steps: usize,
}

/// Column names of [`MetricsReport::values`].
pub const COLUMNS: [&str; 6] = [
    "rmse_x",
    "final_error",
    "max_theta",
    "max_xd",
    "energy",
    "return",
];

impl MetricsReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.rmse_x,
            self.final_error,
            self.max_theta,
            self.max_xd,
            self.energy,
            self.episode_return,
        ]
    }
}

/// Trapezoid rule for `∫ |power| dt` over consecutive rows.
pub fn energy(rows: &[TraceRow]) -> f64 {
    rows.windows(2)
        .map(|w| 0.5 * (w[0].power.abs() + w[1].power.abs()) * (w[1].t - w[0].t))
        .sum()
}

pub fn compute(rows: &[TraceRow], failed: bool) -> Result<MetricsReport, BenchError> {
    let last = rows.last().ok_or(BenchError::EmptyTrace)?;
    let n = rows.len() as f64;
    let max_abs = |f: fn(&TraceRow) -> f64| rows.iter().map(|r| f(r).abs()).fold(0.0, f64::max);
    let report = MetricsReport {
        rmse_x: (rows.iter().map(|r| r.e_x * r.e_x).sum::<f64>() / n).sqrt(),
        final_error: (last.x - last.x_ref).abs(),
        max_theta: max_abs(|r| r.theta),
        max_xd: max_abs(|r| r.xd),
        energy: energy(rows),
        episode_return: rows.iter().map(|r| r.reward).sum(),
        failed,
        steps: rows.len(),
    };
    if !report.values().iter().all(|v| v.is_finite()) {
        return Err(BenchError::validation("trace contains non-finite values"));
    }
    Ok(report)
}
