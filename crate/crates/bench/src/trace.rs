use std::io;
use std::path::Path;

use ewip_core::environment::StepResult;
use ewip_core::dynamics::State;
use serde::{Deserialize, Serialize};

use crate::error::BenchError;

/// Column order of the trace CSV.
pub const HEADER: &str =
    "t,x,z,theta,phi,l,xd,zd,thetad,phid,ld,tau,f_in,x_ref,z_ref,e_x,e_z,reward,power";

/// State after one control step, the input held over that step and the
/// tracking terms at the step's end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
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
    pub tau: f64,
    pub f_in: f64,
    pub x_ref: f64,
    pub z_ref: f64,
    pub e_x: f64,
    pub e_z: f64,
    pub reward: f64,
    /// Wheel power tau * phid (W).
    pub power: f64,
}

impl TraceRow {
    pub fn from_step(state: &State, step: &StepResult) -> Self {
        let d = &step.diagnostics;
        Self {
            t: d.t,
            x: state.x,
            z: state.z,
            theta: state.theta,
            phi: state.phi,
            l: state.l,
            xd: state.xd,
            zd: state.zd,
            thetad: state.thetad,
            phid: state.phid,
            ld: state.ld,
            tau: d.applied.tau,
            f_in: d.applied.f_in,
            x_ref: d.x_ref,
            z_ref: d.z_ref,
            e_x: d.e_x,
            e_z: d.e_z,
            reward: step.reward.total,
            power: d.applied.tau * state.phid,
        }
    }
}

pub fn write<W: io::Write>(rows: &[TraceRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save(rows: &[TraceRow], path: &Path) -> Result<(), BenchError> {
    write(rows, std::fs::File::create(path)?)
}

pub fn read<R: io::Read>(input: R) -> Result<Vec<TraceRow>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != HEADER {
        return Err(BenchError::validation(format!(
            "unexpected trace header `{}`",
            header.join(",")
        )));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn load(path: &Path) -> Result<Vec<TraceRow>, BenchError> {
    read(std::fs::File::open(path)?)
}
