//! Side-by-side comparison of evaluation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::BenchError;
use crate::evaluate::{EvaluationReport, REPORT_FILE, TRACE_FILE};
use crate::metrics::{MetricsReport, COLUMNS};

/// A finished evaluation run on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub report: EvaluationReport,
    pub trace: PathBuf,
}

impl Run {
    pub fn load(dir: &Path) -> Result<Self, BenchError> {
        Ok(Self {
            report: EvaluationReport::load(&dir.join(REPORT_FILE))?,
            trace: dir.join(TRACE_FILE),
        })
    }
}

/// `b - a`, column by column.
pub fn differences(a: &MetricsReport, b: &MetricsReport) -> [f64; 6] {
    let (a, b) = (a.values(), b.values());
    std::array::from_fn(|i| b[i] - a[i])
}

/// Refuse to line up runs that tracked different references.
pub fn check_compatible(reports: &[&EvaluationReport]) -> Result<(), BenchError> {
    if reports.len() < 2 {
        return Err(BenchError::validation("compare needs at least two reports"));
    }
    let first = reports[0];
    for r in &reports[1..] {
        if r.trajectory != first.trajectory {
            return Err(BenchError::validation(format!(
                "trajectory of `{}` differs from `{}`: {:?} vs {:?}",
                r.label, first.label, r.trajectory, first.trajectory
            )));
        }
    }
    Ok(())
}

/// Aligned text table: one row per report, then differences to the first.
pub fn table(reports: &[&EvaluationReport]) -> String {
    let mut head = vec!["label".to_owned(), "kind".to_owned()];
    head.extend(COLUMNS.iter().map(|c| c.to_string()));
    head.push("failed".into());
    let mut rows = vec![head];
    for r in reports {
        let mut row = vec![r.label.clone(), r.kind.to_string()];
        row.extend(r.metrics.values().iter().map(|v| format!("{v:.6}")));
        row.push(r.metrics.failed.to_string());
        rows.push(row);
    }
    for r in reports.iter().skip(1) {
        let mut row = vec![format!("{} - {}", r.label, reports[0].label), "delta".into()];
        row.extend(
            differences(&reports[0].metrics, &r.metrics)
                .iter()
                .map(|v| format!("{v:+.6}")),
        );
        row.push(String::new());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn quoted(p: &Path) -> String {
    format!("\"{}\"", p.display().to_string().replace('"', "\\\""))
}

fn overlay(runs: &[Run], column: usize, title: impl Fn(&Run) -> String) -> String {
    let series: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{} skip 1 using 1:{column} with lines title \"{}\"",
                quoted(&r.trace),
                title(r)
            )
        })
        .collect();
    format!("plot {}\n", series.join(", \\\n     "))
}

fn preamble(name: &str, size: &str) -> String {
    format!(
        "set datafile separator \",\"\nset terminal pngcairo size {size}\nset output \"{name}.png\"\nset grid\nset xlabel \"t (s)\"\n"
    )
}

/// Gnuplot scripts overlaying the traces: states, wheel torque and wheel power.
pub fn plot_scripts(runs: &[Run]) -> Vec<(&'static str, String)> {
    let label = |r: &Run| r.report.label.clone();
    let mut states = preamble("states", "1000,900");
    states.push_str("set multiplot layout 3,1\n");
    for (col, name) in [(2, "x (m)"), (4, "theta (rad)"), (6, "l (m)")] {
        let _ = write!(states, "set ylabel \"{name}\"\n{}", overlay(runs, col, label));
    }
    states.push_str("unset multiplot\n");

    let mut torque = preamble("torque", "1000,500");
    torque.push_str("set ylabel \"tau (N m)\"\n");
    torque.push_str(&overlay(runs, 12, label));

    let mut power = preamble("power", "1000,500");
    power.push_str("set ylabel \"tau * phid (W)\"\n");
    power.push_str(&overlay(runs, 19, |r| {
        format!("{} (|E| = {:.3} J)", r.report.label, r.report.metrics.energy)
    }));
    vec![
        ("states.gp", states),
        ("torque.gp", torque),
        ("power.gp", power),
    ]
}

/// Load each run directory, check them against each other and write
/// `comparison.txt` plus the plot scripts into `out`.
pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<String, BenchError> {
    if dirs.len() < 2 {
        return Err(BenchError::validation("compare needs at least two run directories"));
    }
    let runs = dirs
        .iter()
        .map(|d| {
            let mut run = Run::load(d)?;
            run.trace = fs::canonicalize(&run.trace).unwrap_or(run.trace);
            Ok(run)
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let reports: Vec<&EvaluationReport> = runs.iter().map(|r| &r.report).collect();
    check_compatible(&reports)?;
    let text = table(&reports);
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.txt"), &text)?;
    for (name, script) in plot_scripts(&runs) {
        fs::write(out.join(name), script)?;
    }
    Ok(text)
}
