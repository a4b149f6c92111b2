//! Head-vehicle velocity profiles for the two experiments, the
//! instantaneous fuel-consumption metric, and the three-way comparison
//! harness producing per-phase fuel reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerParams, DeepLccController, EquilibriumEstimation, StepMeta};
use crate::data::HankelBlocks;
use crate::error::{Error, Result};
use crate::model::{discretize, model_from_platoon};
use crate::mpc::{MpcController, MpcParams};
use crate::trajectory::TrajectoryLog;
use crate::vehicle::{simulate_closed_loop, HeadMotion, PlatoonConfig, ZeroControl};

/// One piecewise-linear segment: ramp (or hold) toward `target` over
/// `duration` seconds. Emergency segments are exempt from the comfort
/// acceleration check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub target: f64,
    pub emergency: bool,
}

/// Piecewise-linear head-vehicle velocity profile. Velocity is continuous
/// across segment boundaries by construction and holds the last target
/// after the final segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    pub initial: f64,
    pub segments: Vec<Segment>,
}

impl VelocityProfile {
    pub fn new(initial: f64, segments: Vec<Segment>) -> Result<Self> {
        if initial < 0.0 {
            return Err(Error::InvalidConfig("profile starts at negative velocity".into()));
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.duration <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "segment {i} has nonpositive duration"
                )));
            }
            if seg.target < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "segment {i} targets a negative velocity"
                )));
            }
        }
        Ok(VelocityProfile { initial, segments })
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Largest |dv/dt| over the non-emergency segments.
    pub fn max_ramp_accel(&self) -> f64 {
        let mut v_prev = self.initial;
        let mut worst = 0.0f64;
        for seg in &self.segments {
            let accel = (seg.target - v_prev) / seg.duration;
            if !seg.emergency {
                worst = worst.max(accel.abs());
            }
            v_prev = seg.target;
        }
        worst
    }

    pub fn final_velocity(&self) -> f64 {
        self.segments.last().map_or(self.initial, |s| s.target)
    }

    pub fn velocity_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.initial;
        }
        let mut t_start = 0.0;
        let mut v_prev = self.initial;
        for seg in &self.segments {
            let t_end = t_start + seg.duration;
            if t < t_end {
                let frac = (t - t_start) / seg.duration;
                return v_prev + frac * (seg.target - v_prev);
            }
            t_start = t_end;
            v_prev = seg.target;
        }
        v_prev
    }
}

impl HeadMotion for VelocityProfile {
    fn velocity(&self, t: f64) -> f64 {
        self.velocity_at(t)
    }
}

/// A profile plus the phase boundaries its fuel report is split by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub profile: VelocityProfile,
    /// Half-open time windows covering the whole duration.
    pub phases: Vec<(f64, f64)>,
    /// Labels phases as braking (true) or accelerating (false) character.
    pub braking_phase: Vec<bool>,
}

/// Shape parameters of the cruise-cycle profile; the bundled configuration
/// carries these same defaults so reported numbers are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EudcShape {
    pub v_cruise: f64,
    pub v_low: f64,
    pub v_high: f64,
    pub brake_accel: f64,
    pub accel_low: f64,
    pub accel_high: f64,
    pub lead_in: f64,
    pub hold: f64,
}

impl Default for EudcShape {
    fn default() -> Self {
        EudcShape {
            v_cruise: 15.0,
            v_low: 10.0,
            v_high: 22.0,
            brake_accel: -1.5,
            accel_low: 1.0,
            accel_high: 1.0,
            lead_in: 3.0,
            hold: 15.0,
        }
    }
}

/// Four-phase extra-urban-style cycle: brake to a low speed, recover,
/// accelerate to a high cruise, brake back. Starts and ends at the cruise
/// velocity; ramp rates stay within the CAV acceleration bounds.
pub fn eudc_like_profile(shape: &EudcShape) -> Result<VelocityProfile> {
    let s = shape;
    if !(s.v_low < s.v_cruise && s.v_cruise < s.v_high) {
        return Err(Error::InvalidConfig(
            "cycle speeds must satisfy v_low < v_cruise < v_high".into(),
        ));
    }
    if s.brake_accel >= 0.0 || s.accel_low <= 0.0 || s.accel_high <= 0.0 {
        return Err(Error::InvalidConfig("cycle ramp rates have wrong signs".into()));
    }
    let seg = |duration: f64, target: f64| Segment { duration, target, emergency: false };
    let profile = VelocityProfile::new(
        s.v_cruise,
        vec![
            seg(s.lead_in, s.v_cruise),
            // Phase 1: brake to the low speed and settle.
            seg((s.v_cruise - s.v_low) / -s.brake_accel, s.v_low),
            seg(s.hold, s.v_low),
            // Phase 2: recover to the cruise speed.
            seg((s.v_cruise - s.v_low) / s.accel_low, s.v_cruise),
            seg(s.hold, s.v_cruise),
            // Phase 3: accelerate to the high speed.
            seg((s.v_high - s.v_cruise) / s.accel_high, s.v_high),
            seg(s.hold, s.v_high),
            // Phase 4: brake back to the cruise speed.
            seg((s.v_high - s.v_cruise) / -s.brake_accel, s.v_cruise),
            seg(s.hold, s.v_cruise),
        ],
    )?;
    Ok(profile)
}

/// The cycle profile together with its four phase windows.
pub fn eudc_like_scenario(shape: &EudcShape) -> Result<Scenario> {
    let profile = eudc_like_profile(shape)?;
    let durations: Vec<f64> = profile.segments.iter().map(|s| s.duration).collect();
    let mut t = 0.0;
    let mut cut = vec![0.0];
    // Phase boundaries sit at the end of each hold segment (indices 2, 4,
    // 6, 8); the lead-in is folded into phase 1.
    for (i, d) in durations.iter().enumerate() {
        t += d;
        if i >= 2 && i % 2 == 0 {
            cut.push(t);
        }
    }
    let phases = cut.windows(2).map(|w| (w[0], w[1])).collect();
    Ok(Scenario {
        name: "eudc".into(),
        profile,
        phases,
        braking_phase: vec![true, false, false, true],
    })
}

/// Shape parameters of the emergency-brake profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrakeShape {
    pub v_cruise: f64,
    pub v_low: f64,
    /// Emergency deceleration; the maximum braking capability.
    pub brake_accel: f64,
    pub recover_accel: f64,
    pub lead_in: f64,
    pub hold_low: f64,
    pub hold_end: f64,
}

impl Default for BrakeShape {
    fn default() -> Self {
        BrakeShape {
            v_cruise: 15.0,
            v_low: 5.0,
            brake_accel: -5.0,
            recover_accel: 2.0,
            lead_in: 3.0,
            hold_low: 5.0,
            hold_end: 5.0,
        }
    }
}

/// Emergency braking scenario: cruise, brake at the maximum deceleration,
/// hold the low velocity, accelerate back, cruise out.
pub fn brake_profile(shape: &BrakeShape) -> Result<VelocityProfile> {
    let s = shape;
    if !(0.0 <= s.v_low && s.v_low < s.v_cruise) {
        return Err(Error::InvalidConfig("brake profile speeds out of order".into()));
    }
    if s.brake_accel >= 0.0 || s.recover_accel <= 0.0 {
        return Err(Error::InvalidConfig("brake profile ramp rates have wrong signs".into()));
    }
    VelocityProfile::new(
        s.v_cruise,
        vec![
            Segment { duration: s.lead_in, target: s.v_cruise, emergency: false },
            Segment {
                duration: (s.v_cruise - s.v_low) / -s.brake_accel,
                target: s.v_low,
                emergency: true,
            },
            Segment { duration: s.hold_low, target: s.v_low, emergency: false },
            Segment {
                duration: (s.v_cruise - s.v_low) / s.recover_accel,
                target: s.v_cruise,
                emergency: false,
            },
            Segment { duration: s.hold_end, target: s.v_cruise, emergency: false },
        ],
    )
}

pub fn brake_scenario(shape: &BrakeShape) -> Result<Scenario> {
    let profile = brake_profile(shape)?;
    let duration = profile.duration();
    Ok(Scenario {
        name: "brake".into(),
        profile,
        phases: vec![(0.0, duration)],
        braking_phase: vec![true],
    })
}

/// Coefficients of the instantaneous fuel-rate model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuelCoefficients {
    pub idle: f64,
    pub drive: f64,
    pub accel: f64,
    pub resist_const: f64,
    pub resist_v2: f64,
    pub resist_accel: f64,
}

impl Default for FuelCoefficients {
    fn default() -> Self {
        FuelCoefficients {
            idle: 0.444,
            drive: 0.090,
            accel: 0.054,
            resist_const: 0.333,
            resist_v2: 0.00108,
            resist_accel: 1.200,
        }
    }
}

/// Instantaneous fuel rate (mL/s) as a function of velocity and
/// acceleration; the idle floor applies whenever the tractive term is
/// non-positive.
pub fn fuel_rate_with(v: f64, a: f64, c: &FuelCoefficients) -> f64 {
    let r = c.resist_const + c.resist_v2 * v * v + c.resist_accel * a;
    if r > 0.0 {
        let accel_term = if a > 0.0 { c.accel * a * a * v } else { 0.0 };
        c.idle + c.drive * r * v + accel_term
    } else {
        c.idle
    }
}

pub fn fuel_rate(v: f64, a: f64) -> f64 {
    fuel_rate_with(v, a, &FuelCoefficients::default())
}

/// Fuel consumed (mL) by the given vehicles over the time window
/// `[t_from, t_to)`, by trapezoidal integration of the instantaneous rate
/// across control steps (the final step of the log extends flat).
pub fn total_fuel_window(
    log: &TrajectoryLog,
    vehicle_ids: &[usize],
    t_from: f64,
    t_to: f64,
    coeffs: &FuelCoefficients,
) -> Result<f64> {
    let n = log.n();
    for &id in vehicle_ids {
        if id > n {
            return Err(Error::InvalidConfig(format!(
                "vehicle {id} not present in a log of {n} vehicles"
            )));
        }
    }
    let dt = log.dt;
    let mut total = 0.0;
    for (k, rec) in log.steps.iter().enumerate() {
        if rec.time < t_from || rec.time >= t_to {
            continue;
        }
        let next = log.steps.get(k + 1);
        for &id in vehicle_ids {
            let r_here = fuel_rate_with(rec.velocities[id], rec.accels[id], coeffs);
            let r_next = match next {
                Some(nx) => fuel_rate_with(nx.velocities[id], nx.accels[id], coeffs),
                None => r_here,
            };
            total += 0.5 * (r_here + r_next) * dt;
        }
    }
    Ok(total)
}

/// Fuel consumed by the given vehicles over the whole log.
pub fn total_fuel(log: &TrajectoryLog, vehicle_ids: &[usize]) -> Result<f64> {
    total_fuel_window(log, vehicle_ids, 0.0, f64::INFINITY, &FuelCoefficients::default())
}

/// Which control strategy drove a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AllHdv,
    Mpc,
    DeepLcc,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::AllHdv => "all-HDV",
            Strategy::Mpc => "MPC",
            Strategy::DeepLcc => "DeeP-LCC",
        }
    }
}

/// Fuel outcome of one strategy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyFuel {
    pub strategy: Strategy,
    pub total_ml: f64,
    pub phase_ml: Vec<f64>,
    pub completed: bool,
    pub failure: Option<String>,
    pub solver_failures: usize,
}

/// Per-phase and total fuel for the three strategies with reduction
/// percentages against the all-HDV baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuelReport {
    pub scenario: String,
    pub seed: u64,
    pub vehicle_ids: Vec<usize>,
    pub phases: Vec<(f64, f64)>,
    pub all_hdv: StrategyFuel,
    pub mpc: StrategyFuel,
    pub deep_lcc: StrategyFuel,
    /// Reduction percentages (baseline - strategy) / baseline per phase,
    /// MPC first, then the data-driven controller.
    pub mpc_reduction_pct: Vec<f64>,
    pub deep_lcc_reduction_pct: Vec<f64>,
    pub mpc_total_reduction_pct: f64,
    pub deep_lcc_total_reduction_pct: f64,
}

impl FuelReport {
    /// Plain-text table mirroring the JSON content.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Fuel consumption (mL), scenario '{}', seed {}", self.scenario, self.seed);
        let _ = writeln!(out, "{:<10} {:>12} {:>22} {:>22}", "Phase", "All HDVs", "MPC", "DeeP-LCC");
        for (i, (a, b)) in self.phases.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<10} {:>12.2} {:>13.2} ({:>5.2}%) {:>13.2} ({:>5.2}%)",
                format!("{:.0}-{:.0}s", a, b),
                self.all_hdv.phase_ml[i],
                self.mpc.phase_ml[i],
                self.mpc_reduction_pct[i],
                self.deep_lcc.phase_ml[i],
                self.deep_lcc_reduction_pct[i],
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>12.2} {:>13.2} ({:>5.2}%) {:>13.2} ({:>5.2}%)",
            "total",
            self.all_hdv.total_ml,
            self.mpc.total_ml,
            self.mpc_total_reduction_pct,
            self.deep_lcc.total_ml,
            self.deep_lcc_total_reduction_pct,
        );
        out
    }
}

/// Everything a comparison run produces: the report plus the raw logs and
/// per-step solver metadata for the two controllers.
pub struct ComparisonOutput {
    pub report: FuelReport,
    pub log_all_hdv: TrajectoryLog,
    pub log_mpc: TrajectoryLog,
    pub log_deep_lcc: TrajectoryLog,
    pub mpc_steps: Vec<StepMeta>,
    pub deep_lcc_steps: Vec<StepMeta>,
}

fn strategy_fuel(
    strategy: Strategy,
    log: &TrajectoryLog,
    vehicle_ids: &[usize],
    phases: &[(f64, f64)],
    coeffs: &FuelCoefficients,
    solver_failures: usize,
) -> Result<StrategyFuel> {
    let mut phase_ml = Vec::with_capacity(phases.len());
    for &(a, b) in phases {
        phase_ml.push(total_fuel_window(log, vehicle_ids, a, b, coeffs)?);
    }
    Ok(StrategyFuel {
        strategy,
        total_ml: phase_ml.iter().sum(),
        phase_ml,
        completed: log.outcome.is_completed(),
        failure: if log.outcome.is_completed() {
            None
        } else {
            Some(format!("{:?}", log.outcome))
        },
        solver_failures,
    })
}

fn reductions(baseline: &StrategyFuel, other: &StrategyFuel) -> (Vec<f64>, f64) {
    let per_phase = baseline
        .phase_ml
        .iter()
        .zip(&other.phase_ml)
        .map(|(b, s)| if *b > 0.0 { (b - s) / b * 100.0 } else { 0.0 })
        .collect();
    let total = if baseline.total_ml > 0.0 {
        (baseline.total_ml - other.total_ml) / baseline.total_ml * 100.0
    } else {
        0.0
    };
    (per_phase, total)
}

/// Default fuel-scoring subset: vehicles 3 and beyond, whose motion the
/// upstream controllers can influence.
pub fn default_scoring_vehicles(n: usize) -> Vec<usize> {
    (3..=n).collect()
}

/// Run the all-HDV baseline, model-based MPC and the data-driven controller
/// on the same scenario and seed, and compare their fuel consumption.
///
/// A failed strategy run (collision, repeated solver failure) is annotated
/// in the report; the other strategies still complete.
pub fn run_comparison(
    cfg: &PlatoonConfig,
    blocks: &HankelBlocks,
    params: &ControllerParams,
    scenario: &Scenario,
    seed: u64,
    vehicle_ids: &[usize],
    coeffs: &FuelCoefficients,
) -> Result<ComparisonOutput> {
    let duration = scenario.profile.duration();
    let v0 = scenario.profile.velocity_at(0.0);

    let all_hdv_cfg = cfg.all_hdv_variant()?;
    let mut zero = ZeroControl::new(0);
    let log_all_hdv = simulate_closed_loop(&all_hdv_cfg, &mut zero, &scenario.profile, duration, seed)?;

    let model = discretize(&model_from_platoon(cfg, v0)?, cfg.dt_control)?;
    let mut mpc = MpcController::new(
        model,
        MpcParams::from(params),
        cfg.cav_eq_spacing,
        EquilibriumEstimation::WindowMean,
    )?;
    let log_mpc = simulate_closed_loop(cfg, &mut mpc, &scenario.profile, duration, seed)?;

    let mut deep = DeepLccController::new(
        blocks.clone(),
        params.clone(),
        cfg.cav_eq_spacing,
        EquilibriumEstimation::WindowMean,
    )?;
    let log_deep = simulate_closed_loop(cfg, &mut deep, &scenario.profile, duration, seed)?;

    let all_hdv = strategy_fuel(Strategy::AllHdv, &log_all_hdv, vehicle_ids, &scenario.phases, coeffs, 0)?;
    let mpc_fuel = strategy_fuel(
        Strategy::Mpc,
        &log_mpc,
        vehicle_ids,
        &scenario.phases,
        coeffs,
        mpc.solver_failures,
    )?;
    let deep_fuel = strategy_fuel(
        Strategy::DeepLcc,
        &log_deep,
        vehicle_ids,
        &scenario.phases,
        coeffs,
        deep.solver_failures,
    )?;

    let (mpc_phase_pct, mpc_total_pct) = reductions(&all_hdv, &mpc_fuel);
    let (deep_phase_pct, deep_total_pct) = reductions(&all_hdv, &deep_fuel);

    Ok(ComparisonOutput {
        report: FuelReport {
            scenario: scenario.name.clone(),
            seed,
            vehicle_ids: vehicle_ids.to_vec(),
            phases: scenario.phases.clone(),
            all_hdv,
            mpc: mpc_fuel,
            deep_lcc: deep_fuel,
            mpc_reduction_pct: mpc_phase_pct,
            deep_lcc_reduction_pct: deep_phase_pct,
            mpc_total_reduction_pct: mpc_total_pct,
            deep_lcc_total_reduction_pct: deep_total_pct,
        },
        log_all_hdv,
        log_mpc,
        log_deep_lcc: log_deep,
        mpc_steps: mpc.step_log,
        deep_lcc_steps: deep.step_log,
    })
}
