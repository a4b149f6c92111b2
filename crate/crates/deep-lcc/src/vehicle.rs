//! Nonlinear car-following simulation of a mixed platoon.
//!
//! The platoon consists of a head vehicle (index 0) followed by `n` vehicles,
//! of which the ones listed in the CAV index set are acceleration-controlled
//! double integrators and the rest follow an optimal-velocity car-following
//! law with additive uniform acceleration noise. Integration is semi-implicit
//! Euler at a fixed substep, with control inputs zero-order-held across a
//! control interval.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{RunOutcome, StepRecord, TrajectoryLog};

/// Parameters of the optimal-velocity car-following law.
///
/// The acceleration of a human-driven vehicle is
/// `alpha * (V(s) - v) + beta * s_dot`, where the desired velocity `V`
/// rises along a cosine ramp from 0 at the standstill spacing `s_st` to
/// `v_max` at the free-flow spacing `s_go`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvmParams {
    /// Gain on the desired-velocity error (1/s).
    pub alpha: f64,
    /// Gain on the relative velocity to the preceding vehicle (1/s).
    pub beta: f64,
    /// Standstill spacing below which the desired velocity is zero (m).
    pub s_st: f64,
    /// Free-flow spacing above which the desired velocity saturates (m).
    pub s_go: f64,
    /// Free-flow velocity (m/s).
    pub v_max: f64,
}

impl OvmParams {
    /// Nominal parameter set used throughout the experiments.
    pub fn nominal() -> Self {
        OvmParams {
            alpha: 0.6,
            beta: 0.9,
            s_st: 5.0,
            s_go: 35.0,
            v_max: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.v_max > 0.0) {
            return Err(Error::InvalidConfig(
                "OVM gains alpha, beta and v_max must be positive".into(),
            ));
        }
        if !(0.0 < self.s_st && self.s_st < self.s_go) {
            return Err(Error::InvalidConfig(
                "OVM spacings must satisfy 0 < s_st < s_go".into(),
            ));
        }
        Ok(())
    }

    /// Desired (optimal) velocity for a given spacing.
    pub fn desired_velocity(&self, spacing: f64) -> f64 {
        if spacing <= self.s_st {
            0.0
        } else if spacing >= self.s_go {
            self.v_max
        } else {
            let phase = PI * (spacing - self.s_st) / (self.s_go - self.s_st);
            self.v_max * (1.0 - phase.cos()) / 2.0
        }
    }

    /// Derivative of the desired velocity with respect to spacing.
    pub fn desired_velocity_gradient(&self, spacing: f64) -> f64 {
        if spacing <= self.s_st || spacing >= self.s_go {
            0.0
        } else {
            let width = self.s_go - self.s_st;
            let phase = PI * (spacing - self.s_st) / width;
            self.v_max * PI / (2.0 * width) * phase.sin()
        }
    }
}

/// Car-following acceleration of a human-driven vehicle.
///
/// Total in all three arguments: a non-positive spacing simply saturates the
/// desired velocity at zero. Contact itself is detected by the simulator,
/// not here.
pub fn ovm_acceleration(spacing: f64, relative_velocity: f64, velocity: f64, p: &OvmParams) -> f64 {
    p.alpha * (p.desired_velocity(spacing) - velocity) + p.beta * relative_velocity
}

/// Equilibrium spacing `s*` with `V(s*) = v*`, solved in closed form on the
/// cosine branch. For `v* = 0` every spacing at or below `s_st` qualifies;
/// the boundary `s_st` is returned as the unique continuous limit.
pub fn equilibrium_spacing(v_star: f64, p: &OvmParams) -> Result<f64> {
    if v_star < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "equilibrium velocity must be nonnegative, got {v_star}"
        )));
    }
    if v_star >= p.v_max {
        return Err(Error::NoEquilibrium {
            v_star,
            v_max: p.v_max,
        });
    }
    if v_star == 0.0 {
        return Ok(p.s_st);
    }
    let phase = (1.0 - 2.0 * v_star / p.v_max).acos();
    Ok(p.s_st + phase / PI * (p.s_go - p.s_st))
}

/// Static description of one mixed platoon: topology, human driver
/// parameters and timing. Ground truth for every simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonConfig {
    /// Number of vehicles behind the head vehicle.
    pub n: usize,
    /// Strictly increasing CAV indices within `1..=n`. Empty means an
    /// all-HDV platoon (valid for simulation, rejected by the controllers).
    pub cav_set: Vec<usize>,
    /// Car-following parameters per vehicle index. Entries are required for
    /// every index outside `cav_set`; entries for CAV indices are kept so an
    /// all-HDV variant of the same platoon can be derived.
    pub hdv_params: BTreeMap<usize, OvmParams>,
    /// Control sampling interval (s).
    pub dt_control: f64,
    /// Integrator substep (s); must divide `dt_control` exactly.
    pub dt_sim: f64,
    /// Half-width of the uniform acceleration noise on HDVs (m/s²).
    pub noise_amplitude: f64,
    /// Designed equilibrium spacing of the CAVs (m).
    pub cav_eq_spacing: f64,
}

impl PlatoonConfig {
    /// Platoon with identical parameters for every vehicle.
    pub fn uniform(
        n: usize,
        cav_set: Vec<usize>,
        params: OvmParams,
        dt_control: f64,
        dt_sim: f64,
        noise_amplitude: f64,
    ) -> Result<Self> {
        let hdv_params = (1..=n).map(|i| (i, params)).collect();
        let cfg = PlatoonConfig {
            n,
            cav_set,
            hdv_params,
            dt_control,
            dt_sim,
            noise_amplitude,
            cav_eq_spacing: 20.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Platoon with heterogeneous drivers: `alpha` and `beta` of every
    /// vehicle are scaled by independent multipliers drawn uniformly from
    /// `[1 - spread, 1 + spread]` with a seeded generator. Multipliers are
    /// drawn for all `n` positions so the all-HDV variant shares them.
    #[allow(clippy::too_many_arguments)]
    pub fn heterogeneous(
        n: usize,
        cav_set: Vec<usize>,
        nominal: OvmParams,
        spread: f64,
        seed: u64,
        dt_control: f64,
        dt_sim: f64,
        noise_amplitude: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&spread) {
            return Err(Error::InvalidConfig(format!(
                "heterogeneity spread must lie in [0, 1), got {spread}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut hdv_params = BTreeMap::new();
        for i in 1..=n {
            let ka: f64 = rng.random_range(1.0 - spread..=1.0 + spread);
            let kb: f64 = rng.random_range(1.0 - spread..=1.0 + spread);
            hdv_params.insert(
                i,
                OvmParams {
                    alpha: nominal.alpha * ka,
                    beta: nominal.beta * kb,
                    ..nominal
                },
            );
        }
        let cfg = PlatoonConfig {
            n,
            cav_set,
            hdv_params,
            dt_control,
            dt_sim,
            noise_amplitude,
            cav_eq_spacing: 20.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("platoon must contain at least one vehicle".into()));
        }
        for w in self.cav_set.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidConfig(
                    "cav_set must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&first) = self.cav_set.first() {
            if first < 1 {
                return Err(Error::InvalidConfig("CAV indices start at 1".into()));
            }
        }
        if let Some(&last) = self.cav_set.last() {
            if last > self.n {
                return Err(Error::InvalidConfig(format!(
                    "CAV index {last} exceeds platoon size {}",
                    self.n
                )));
            }
        }
        if !(self.dt_sim > 0.0 && self.dt_control > 0.0) {
            return Err(Error::InvalidConfig("time steps must be positive".into()));
        }
        let ratio = self.dt_control / self.dt_sim;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio < 1.0 - 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "dt_sim = {} must divide dt_control = {} exactly",
                self.dt_sim, self.dt_control
            )));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::InvalidConfig("noise amplitude must be nonnegative".into()));
        }
        if self.cav_eq_spacing <= 0.0 {
            return Err(Error::InvalidConfig("CAV equilibrium spacing must be positive".into()));
        }
        for i in 1..=self.n {
            if self.is_cav(i) {
                continue;
            }
            match self.hdv_params.get(&i) {
                Some(p) => p.validate()?,
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "missing OVM parameters for HDV {i}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Number of CAVs.
    pub fn m(&self) -> usize {
        self.cav_set.len()
    }

    pub fn is_cav(&self, vehicle: usize) -> bool {
        self.cav_set.binary_search(&vehicle).is_ok()
    }

    /// Integrator substeps per control interval.
    pub fn substeps_per_control(&self) -> usize {
        (self.dt_control / self.dt_sim).round() as usize
    }

    /// The same platoon with every CAV replaced by the human driver drawn
    /// for that position. Requires parameters for all CAV indices, which
    /// [`PlatoonConfig::uniform`] and [`PlatoonConfig::heterogeneous`] provide.
    pub fn all_hdv_variant(&self) -> Result<PlatoonConfig> {
        for i in &self.cav_set {
            if !self.hdv_params.contains_key(i) {
                return Err(Error::InvalidConfig(format!(
                    "no OVM parameters stored for CAV position {i}; cannot form all-HDV variant"
                )));
            }
        }
        let mut cfg = self.clone();
        cfg.cav_set = Vec::new();
        Ok(cfg)
    }

    /// Equilibrium spacing of vehicle `i` at velocity `v_star`: the OVM
    /// equilibrium for HDVs, the designed constant for CAVs.
    pub fn vehicle_eq_spacing(&self, vehicle: usize, v_star: f64) -> Result<f64> {
        if self.is_cav(vehicle) {
            Ok(self.cav_eq_spacing)
        } else {
            let p = self.hdv_params.get(&vehicle).ok_or_else(|| {
                Error::InvalidConfig(format!("missing OVM parameters for HDV {vehicle}"))
            })?;
            equilibrium_spacing(v_star, p)
        }
    }
}

/// Instantaneous kinematic state of the platoon. Index 0 is the head vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub time: f64,
}

impl SimState {
    /// Spacing of vehicle `i >= 1` to its predecessor.
    pub fn spacing(&self, vehicle: usize) -> f64 {
        self.positions[vehicle - 1] - self.positions[vehicle]
    }

    /// Index of the first vehicle whose spacing is non-positive, if any.
    pub fn collision(&self) -> Option<usize> {
        (1..self.positions.len()).find(|&i| self.spacing(i) <= 0.0)
    }
}

/// Platoon at rest in the equilibrium of `v_star`: every vehicle at its own
/// equilibrium spacing, head vehicle at position 0.
pub fn equilibrium_state(cfg: &PlatoonConfig, v_star: f64) -> Result<SimState> {
    let mut positions = Vec::with_capacity(cfg.n + 1);
    positions.push(0.0);
    for i in 1..=cfg.n {
        let s = cfg.vehicle_eq_spacing(i, v_star)?;
        positions.push(positions[i - 1] - s);
    }
    Ok(SimState {
        positions,
        velocities: vec![v_star; cfg.n + 1],
        time: 0.0,
    })
}

/// Advance the platoon by one integrator substep.
///
/// HDV accelerations come from the car-following law plus one uniform noise
/// draw per vehicle (in index order, skipped entirely when the amplitude is
/// zero); CAV accelerations are the given inputs; the head vehicle follows
/// `head_accel`. Velocities are updated first and clamped at zero, positions
/// then advance with the new velocities.
pub fn step(
    state: &SimState,
    cav_inputs: &[f64],
    head_accel: f64,
    cfg: &PlatoonConfig,
    rng: &mut ChaCha12Rng,
) -> Result<SimState> {
    if cav_inputs.len() != cfg.m() {
        return Err(Error::DimensionMismatch(format!(
            "expected {} CAV inputs, got {}",
            cfg.m(),
            cav_inputs.len()
        )));
    }
    let h = cfg.dt_sim;
    let mut accels = Vec::with_capacity(cfg.n + 1);
    accels.push(head_accel);
    let mut cav_cursor = 0;
    for i in 1..=cfg.n {
        if cfg.is_cav(i) {
            accels.push(cav_inputs[cav_cursor]);
            cav_cursor += 1;
        } else {
            let p = &cfg.hdv_params[&i];
            let s = state.spacing(i);
            let s_dot = state.velocities[i - 1] - state.velocities[i];
            let mut a = ovm_acceleration(s, s_dot, state.velocities[i], p);
            if cfg.noise_amplitude > 0.0 {
                a += rng.random_range(-cfg.noise_amplitude..=cfg.noise_amplitude);
            }
            accels.push(a);
        }
    }

    let mut next = state.clone();
    next.time += h;
    for (i, &a) in accels.iter().enumerate() {
        next.velocities[i] = (state.velocities[i] + h * a).max(0.0);
        next.positions[i] = state.positions[i] + h * next.velocities[i];
    }
    if let Some(vehicle) = next.collision() {
        return Err(Error::Collision {
            time: next.time,
            vehicle,
        });
    }
    Ok(next)
}

/// Head-vehicle motion supplied to a closed-loop run, as a velocity signal.
pub trait HeadMotion {
    fn velocity(&self, t: f64) -> f64;
}

impl<F: Fn(f64) -> f64> HeadMotion for F {
    fn velocity(&self, t: f64) -> f64 {
        self(t)
    }
}

/// Everything a control policy may measure at a control instant.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub time: f64,
    /// Velocities of vehicles `1..=n`.
    pub velocities: Vec<f64>,
    pub head_velocity: f64,
    /// Spacings of the CAVs, in CAV-set order.
    pub cav_spacings: Vec<f64>,
}

/// A control policy queried once per control interval for the CAV
/// accelerations to hold over that interval.
pub trait ControlPolicy {
    fn control(&mut self, meas: &Measurement) -> Result<Vec<f64>>;
}

/// Policy for platoons without actuated vehicles (or with CAVs holding zero
/// input): returns the right number of zeros.
pub struct ZeroControl {
    m: usize,
}

impl ZeroControl {
    pub fn new(m: usize) -> Self {
        ZeroControl { m }
    }
}

impl ControlPolicy for ZeroControl {
    fn control(&mut self, _meas: &Measurement) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.m])
    }
}

fn measurement(state: &SimState, cfg: &PlatoonConfig) -> Measurement {
    Measurement {
        time: state.time,
        velocities: state.velocities[1..].to_vec(),
        head_velocity: state.velocities[0],
        cav_spacings: cfg.cav_set.iter().map(|&i| state.spacing(i)).collect(),
    }
}

/// Run the platoon in closed loop from an equilibrium start at the profile's
/// initial velocity. See [`simulate_closed_loop_from`].
pub fn simulate_closed_loop(
    cfg: &PlatoonConfig,
    policy: &mut dyn ControlPolicy,
    head: &dyn HeadMotion,
    duration: f64,
    seed: u64,
) -> Result<TrajectoryLog> {
    let initial = equilibrium_state(cfg, head.velocity(0.0))?;
    Ok(simulate_closed_loop_from(initial, cfg, policy, head, duration, seed))
}

/// Run the platoon in closed loop from a given initial state.
///
/// The policy is queried at every control instant; its inputs are held
/// constant over the following `dt_control` interval while the integrator
/// advances in `dt_sim` substeps and the head vehicle tracks the velocity
/// profile. The log records state at each control instant together with the
/// realized mean acceleration over the interval. Collisions and policy
/// errors terminate the run with a partial log and an explanatory outcome.
pub fn simulate_closed_loop_from(
    initial: SimState,
    cfg: &PlatoonConfig,
    policy: &mut dyn ControlPolicy,
    head: &dyn HeadMotion,
    duration: f64,
    seed: u64,
) -> TrajectoryLog {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_control = (duration / cfg.dt_control).round() as usize;
    let substeps = cfg.substeps_per_control();
    let mut log = TrajectoryLog::new(cfg.dt_control, cfg.cav_set.clone());
    let mut state = initial;

    for _ in 0..n_control {
        let meas = measurement(&state, cfg);
        let inputs = match policy.control(&meas) {
            Ok(u) => u,
            Err(e) => {
                log.outcome = RunOutcome::ControllerFailure {
                    time: state.time,
                    reason: e.to_string(),
                };
                return log;
            }
        };

        let before = state.clone();
        let mut failure = None;
        for _ in 0..substeps {
            let t_next = state.time + cfg.dt_sim;
            let head_accel = (head.velocity(t_next) - state.velocities[0]) / cfg.dt_sim;
            match step(&state, &inputs, head_accel, cfg, &mut rng) {
                Ok(next) => state = next,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }

        let dt_elapsed = state.time - before.time;
        let accels: Vec<f64> = if dt_elapsed > 0.0 {
            (0..=cfg.n)
                .map(|i| (state.velocities[i] - before.velocities[i]) / dt_elapsed)
                .collect()
        } else {
            vec![0.0; cfg.n + 1]
        };
        log.steps.push(StepRecord {
            time: before.time,
            positions: before.positions,
            velocities: before.velocities,
            accels,
            applied_inputs: inputs,
        });

        match failure {
            Some(Error::Collision { time, vehicle }) => {
                log.outcome = RunOutcome::Collision { time, vehicle };
                return log;
            }
            Some(e) => {
                log.outcome = RunOutcome::ControllerFailure {
                    time: state.time,
                    reason: e.to_string(),
                };
                return log;
            }
            None => {}
        }
    }
    log.outcome = RunOutcome::Completed;
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn nominal() -> OvmParams {
        OvmParams::nominal()
    }

    #[test]
    fn desired_velocity_midpoint_and_saturation() {
        let p = nominal();
        let mid = (p.s_st + p.s_go) / 2.0;
        assert_abs_diff_eq!(ovm_acceleration(mid, 0.0, p.v_max / 2.0, &p), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ovm_acceleration(40.0, 0.0, p.v_max, &p), 0.0, epsilon = 1e-12);
        assert_eq!(p.desired_velocity(2.0), 0.0);
        assert_eq!(p.desired_velocity(p.s_st), 0.0);
    }

    #[test]
    fn ovm_acceleration_matches_formula_oracle() {
        let p = nominal();
        // Independent evaluation of the cosine law at off-equilibrium points.
        let cases = [(20.0, 0.0, 15.0), (10.0, 0.5, 12.0), (30.0, -1.0, 20.0), (4.0, 2.0, 3.0)];
        for (s, s_dot, v) in cases {
            let v_des = if s <= 5.0 {
                0.0
            } else if s >= 35.0 {
                30.0
            } else {
                30.0 / 2.0 * (1.0 - (PI * (s - 5.0) / 30.0).cos())
            };
            let oracle = 0.6 * (v_des - v) + 0.9 * s_dot;
            assert_abs_diff_eq!(ovm_acceleration(s, s_dot, v, &p), oracle, epsilon = 1e-14);
        }
    }

    #[test]
    fn equilibrium_spacing_closed_form() {
        let p = nominal();
        assert_abs_diff_eq!(equilibrium_spacing(15.0, &p).unwrap(), 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(equilibrium_spacing(0.0, &p).unwrap(), p.s_st, epsilon = 1e-12);
        // F(s*, 0, v*) = 0 by construction across the branch.
        for v in [1.0, 7.5, 22.0, 29.9] {
            let s = equilibrium_spacing(v, &p).unwrap();
            assert_abs_diff_eq!(ovm_acceleration(s, 0.0, v, &p), 0.0, epsilon = 1e-9);
        }
        assert!(matches!(
            equilibrium_spacing(30.0, &p),
            Err(Error::NoEquilibrium { .. })
        ));
        assert!(equilibrium_spacing(-1.0, &p).is_err());
    }

    fn test_config(n: usize, cav_set: Vec<usize>, noise: f64) -> PlatoonConfig {
        PlatoonConfig::uniform(n, cav_set, nominal(), 0.05, 0.01, noise).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_inputs() {
        assert!(PlatoonConfig::uniform(4, vec![2, 2], nominal(), 0.05, 0.01, 0.0).is_err());
        assert!(PlatoonConfig::uniform(4, vec![5], nominal(), 0.05, 0.01, 0.0).is_err());
        assert!(PlatoonConfig::uniform(4, vec![1], nominal(), 0.05, 0.03, 0.0).is_err());
        let mut cfg = test_config(3, vec![2], 0.0);
        cfg.hdv_params.remove(&1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn equilibrium_is_a_fixed_point_for_1000_substeps() {
        let cfg = test_config(5, vec![2], 0.0);
        let initial = equilibrium_state(&cfg, 15.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut state = initial.clone();
        for _ in 0..1000 {
            state = step(&state, &[0.0], 0.0, &cfg, &mut rng).unwrap();
        }
        for i in 0..=cfg.n {
            let drift = (state.velocities[i] - initial.velocities[i]).abs();
            assert!(drift <= 1e-9, "velocity drift {drift} at vehicle {i}");
            let s0 = if i >= 1 { initial.spacing(i) } else { 0.0 };
            let s1 = if i >= 1 { state.spacing(i) } else { 0.0 };
            assert!((s1 - s0).abs() <= 1e-9, "spacing drift at vehicle {i}");
        }
    }

    #[test]
    fn single_step_matches_hand_stepped_euler_oracle() {
        let cfg = test_config(3, vec![2], 0.1);
        let mut state = equilibrium_state(&cfg, 15.0).unwrap();
        state.velocities[1] += 0.4;
        state.velocities[3] -= 0.2;
        let u = [0.7];

        // Mirror the integrator by hand, replaying the same noise stream.
        let mut rng_a = ChaCha12Rng::seed_from_u64(99);
        let mut rng_b = rng_a.clone();
        let next = step(&state, &u, -0.3, &cfg, &mut rng_a).unwrap();

        let p = nominal();
        let h = cfg.dt_sim;
        let mut accels = vec![-0.3];
        for i in 1..=3usize {
            if i == 2 {
                accels.push(u[0]);
            } else {
                let s = state.positions[i - 1] - state.positions[i];
                let sd = state.velocities[i - 1] - state.velocities[i];
                let noise: f64 = rng_b.random_range(-0.1..=0.1);
                accels.push(ovm_acceleration(s, sd, state.velocities[i], &p) + noise);
            }
        }
        for (i, &a) in accels.iter().enumerate() {
            let v_new = (state.velocities[i] + h * a).max(0.0);
            let p_new = state.positions[i] + h * v_new;
            assert_abs_diff_eq!(next.velocities[i], v_new, epsilon = 1e-12);
            assert_abs_diff_eq!(next.positions[i], p_new, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(next.time, state.time + h, epsilon = 1e-12);
    }

    #[test]
    fn head_brake_clamps_velocity_at_zero() {
        let cfg = test_config(1, vec![1], 0.0);
        let mut state = equilibrium_state(&cfg, 0.2).unwrap();
        // Spread the pair far apart so the stopped head is not rear-ended.
        state.positions[1] -= 30.0;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut v_prev = state.velocities[0];
        for _ in 0..10 {
            state = step(&state, &[-0.5], -5.0, &cfg, &mut rng).unwrap();
            let expected = (v_prev - 5.0 * cfg.dt_sim).max(0.0);
            assert_abs_diff_eq!(state.velocities[0], expected, epsilon = 1e-12);
            v_prev = state.velocities[0];
        }
        assert_eq!(state.velocities[0], 0.0);
    }

    #[test]
    fn noise_departs_from_noiseless_by_at_most_amplitude() {
        let cfg_noisy = test_config(4, vec![], 0.1);
        let cfg_clean = test_config(4, vec![], 0.0);
        let mut state = equilibrium_state(&cfg_noisy, 15.0).unwrap();
        state.velocities[2] += 1.0;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut rng_unused = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let noisy = step(&state, &[], 0.0, &cfg_noisy, &mut rng).unwrap();
            let clean = step(&state, &[], 0.0, &cfg_clean, &mut rng_unused).unwrap();
            for i in 1..=4usize {
                let dv = (noisy.velocities[i] - clean.velocities[i]).abs() / cfg_noisy.dt_sim;
                assert!(dv <= 0.1 + 1e-12, "noise deviation {dv} exceeds amplitude");
            }
            state = noisy;
        }
    }

    #[test]
    fn collision_is_reported_not_silent() {
        let cfg = test_config(2, vec![1], 0.0);
        let mut state = equilibrium_state(&cfg, 15.0).unwrap();
        state.positions[1] = state.positions[0] - 0.01;
        state.velocities[1] = state.velocities[0] + 5.0;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut result = Ok(state.clone());
        for _ in 0..200 {
            result = step(result.as_ref().unwrap(), &[0.0], 0.0, &cfg, &mut rng);
            if result.is_err() {
                break;
            }
        }
        assert!(matches!(result, Err(Error::Collision { vehicle: 1, .. })));
    }

    #[test]
    fn zero_perturbation_closed_loop_holds_equilibrium() {
        let cfg = test_config(4, vec![2], 0.0);
        let mut policy = ZeroControl::new(1);
        let head = |_t: f64| 15.0;
        let log = simulate_closed_loop(&cfg, &mut policy, &head, 5.0, 3).unwrap();
        assert_eq!(log.outcome, RunOutcome::Completed);
        for rec in &log.steps {
            for i in 1..=4usize {
                assert_abs_diff_eq!(rec.velocities[i], 15.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn all_hdv_brake_amplifies_upstream() {
        // Nominal OVM at 15 m/s is string unstable: each follower dips lower
        // than its predecessor under a step brake of the head vehicle.
        let cfg = test_config(5, vec![], 0.0);
        let head = |t: f64| {
            if t < 2.0 {
                15.0
            } else if t < 4.0 {
                15.0 - 3.5 * (t - 2.0)
            } else {
                8.0
            }
        };
        let mut policy = ZeroControl::new(0);
        let log = simulate_closed_loop(&cfg, &mut policy, &head, 40.0, 11).unwrap();
        assert_eq!(log.outcome, RunOutcome::Completed);
        let min_v = |i: usize| {
            log.steps
                .iter()
                .map(|r| r.velocities[i])
                .fold(f64::INFINITY, f64::min)
        };
        for i in 2..=5usize {
            assert!(
                min_v(i) < min_v(i - 1) + 1e-9,
                "vehicle {i} did not dip below vehicle {}: {} vs {}",
                i - 1,
                min_v(i),
                min_v(i - 1)
            );
        }
    }

    #[test]
    fn same_seed_reproduces_identical_logs() {
        let cfg = test_config(4, vec![3], 0.1);
        let head = |t: f64| 15.0 - if t > 1.0 { 1.0 } else { 0.0 } * (t - 1.0).min(2.0);
        let run = || {
            let mut policy = ZeroControl::new(1);
            simulate_closed_loop(&cfg, &mut policy, &head, 4.0, 42).unwrap()
        };
        let a = run().to_csv();
        let b = run().to_csv();
        assert_eq!(a, b);
    }
}
