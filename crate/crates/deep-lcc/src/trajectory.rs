//! Closed-loop run records and their CSV serialization.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io_util;

/// How a closed-loop run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Collision { time: f64, vehicle: usize },
    ControllerFailure { time: f64, reason: String },
}

impl RunOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunOutcome::Completed)
    }
}

/// State of every vehicle at one control instant, plus the realized mean
/// acceleration over the following control interval and the inputs applied
/// to the CAVs during it. Vehicle index 0 is the head vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub accels: Vec<f64>,
    pub applied_inputs: Vec<f64>,
}

impl StepRecord {
    pub fn spacing(&self, vehicle: usize) -> f64 {
        self.positions[vehicle - 1] - self.positions[vehicle]
    }
}

/// Per-control-step log of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    /// Control sampling interval (s).
    pub dt: f64,
    pub cav_set: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub outcome: RunOutcome,
}

impl TrajectoryLog {
    pub fn new(dt: f64, cav_set: Vec<usize>) -> Self {
        TrajectoryLog {
            dt,
            cav_set,
            steps: Vec::new(),
            outcome: RunOutcome::Completed,
        }
    }

    /// Number of vehicles behind the head in this log.
    pub fn n(&self) -> usize {
        self.steps.first().map_or(0, |s| s.positions.len() - 1)
    }

    /// Velocity trace of one vehicle across the run.
    pub fn velocity_series(&self, vehicle: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.velocities[vehicle]).collect()
    }

    /// Spacing trace of one vehicle (index >= 1) across the run.
    pub fn spacing_series(&self, vehicle: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.spacing(vehicle)).collect()
    }

    /// Render as CSV, one row per vehicle per control step. The spacing
    /// column is empty for the head vehicle and the applied-input column is
    /// empty for every vehicle that is not a CAV.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("t,vehicle_id,position_m,velocity_mps,spacing_m,accel_mps2,is_cav,applied_input_mps2\n");
        for rec in &self.steps {
            let n = rec.positions.len() - 1;
            let mut cav_cursor = 0;
            for i in 0..=n {
                let is_cav = self.cav_set.contains(&i);
                let spacing = if i == 0 {
                    String::new()
                } else {
                    rec.spacing(i).to_string()
                };
                let input = if is_cav {
                    let s = rec.applied_inputs[cav_cursor].to_string();
                    cav_cursor += 1;
                    s
                } else {
                    String::new()
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    rec.time, i, rec.positions[i], rec.velocities[i], spacing, rec.accels[i], is_cav, input
                );
            }
        }
        out
    }

    /// Write the CSV atomically (temp file + rename).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_csv().as_bytes())
    }
}
