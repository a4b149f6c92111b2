//! Data-driven predictive control of the CAVs from pre-collected trajectory
//! data: condensed QP construction over the Hankel-combination vector, the
//! per-step solve, and a receding-horizon policy that re-estimates the
//! traffic equilibrium online.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::HankelBlocks;
use crate::error::{Error, Result};
use crate::qp::{KktResiduals, QpProblem, QpResult, QpSettings, QpSolver, QpStatus};
use crate::vehicle::{ControlPolicy, Measurement};

/// How the past-output consistency constraint enters the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastOutputHandling {
    /// Relax `Yp g = y_ini` with a slack penalized by `lambda_y`; the form
    /// that tolerates noise and nonlinearity.
    Slack,
    /// Enforce `Yp g = y_ini` exactly; only sensible on noise-free data
    /// from a linear plant.
    HardEquality,
}

/// Horizons, weights, regularization and bounds of the predictive controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Past horizon (steps).
    pub tini: usize,
    /// Future horizon (steps).
    pub horizon: usize,
    /// Velocity-error weight on every vehicle.
    pub weight_velocity: f64,
    /// Spacing-error weight on the CAVs.
    pub weight_spacing: f64,
    /// Control-energy weight.
    pub weight_input: f64,
    pub lambda_g: f64,
    pub lambda_y: f64,
    /// Bounds on the CAV spacing errors (m).
    pub spacing_error_min: f64,
    pub spacing_error_max: f64,
    /// Bounds on the CAV accelerations (m/s²).
    pub accel_min: f64,
    pub accel_max: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    /// Refine each solve on its active set. Costs one dense factorization
    /// per step; the warm-started receding-horizon loop usually runs fine
    /// on the splitting iteration alone.
    pub qp_polish: bool,
    pub past_output: PastOutputHandling,
}

impl ControllerParams {
    /// The experiment defaults: Tini = 20, N = 50, weights (1, 0.5, 0.1),
    /// regularizers (100, 10000), spacing-error bounds [-15, 20] m and
    /// acceleration bounds [-5, 2] m/s².
    pub fn experiment_defaults() -> Self {
        ControllerParams {
            tini: 20,
            horizon: 50,
            weight_velocity: 1.0,
            weight_spacing: 0.5,
            weight_input: 0.1,
            lambda_g: 100.0,
            lambda_y: 10_000.0,
            spacing_error_min: -15.0,
            spacing_error_max: 20.0,
            accel_min: -5.0,
            accel_max: 2.0,
            qp_tol: 1e-6,
            qp_max_iter: 20_000,
            qp_polish: true,
            past_output: PastOutputHandling::Slack,
        }
    }

    /// Validate against a platoon of `n` vehicles; returns human-readable
    /// warnings for soft violations (short past horizon).
    pub fn validate(&self, n: usize) -> Result<Vec<String>> {
        if self.tini == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig("horizons must be at least 1".into()));
        }
        if self.weight_velocity < 0.0 || self.weight_spacing < 0.0 || self.weight_input < 0.0 {
            return Err(Error::InvalidConfig("cost weights must be nonnegative".into()));
        }
        if self.lambda_g < 0.0 {
            return Err(Error::InvalidConfig("lambda_g must be nonnegative".into()));
        }
        if self.past_output == PastOutputHandling::Slack && self.lambda_y <= 0.0 {
            return Err(Error::InvalidConfig("lambda_y must be positive".into()));
        }
        if self.spacing_error_min >= self.spacing_error_max {
            return Err(Error::InvalidConfig("spacing-error bounds crossed".into()));
        }
        if self.accel_min >= self.accel_max {
            return Err(Error::InvalidConfig("acceleration bounds crossed".into()));
        }
        if self.qp_tol <= 0.0 {
            return Err(Error::InvalidConfig("qp_tol must be positive".into()));
        }
        let mut warnings = Vec::new();
        if self.tini < 2 * n {
            warnings.push(format!(
                "tini = {} is below 2n = {}; the data-driven prediction may be non-unique",
                self.tini,
                2 * n
            ));
        }
        Ok(warnings)
    }

    fn qp_settings(&self) -> QpSettings {
        QpSettings {
            eps_abs: self.qp_tol,
            eps_rel: self.qp_tol,
            max_iter: self.qp_max_iter,
            polish: self.qp_polish,
            ..QpSettings::default()
        }
    }
}

/// Most recent past data in error coordinates, ready for the program.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineWindow {
    /// CAV inputs, `m x tini`, oldest column first.
    pub u_ini: DMatrix<f64>,
    /// Head-vehicle velocity errors, oldest first.
    pub eps_ini: DVector<f64>,
    /// Outputs, `(n + m) x tini`, oldest column first.
    pub y_ini: DMatrix<f64>,
}

impl OnlineWindow {
    pub fn zeros(m: usize, output_dim: usize, tini: usize) -> Self {
        OnlineWindow {
            u_ini: DMatrix::zeros(m, tini),
            eps_ini: DVector::zeros(tini),
            y_ini: DMatrix::zeros(output_dim, tini),
        }
    }

    pub fn tini(&self) -> usize {
        self.eps_ini.len()
    }

    fn check_dims(&self, blocks: &HankelBlocks) -> Result<()> {
        if self.u_ini.nrows() != blocks.m
            || self.y_ini.nrows() != blocks.output_dim
            || self.u_ini.ncols() != blocks.tini
            || self.y_ini.ncols() != blocks.tini
            || self.eps_ini.len() != blocks.tini
        {
            return Err(Error::DimensionMismatch(format!(
                "window ({}x{}, {}, {}x{}) does not match blocks (m = {}, p = {}, tini = {})",
                self.u_ini.nrows(),
                self.u_ini.ncols(),
                self.eps_ini.len(),
                self.y_ini.nrows(),
                self.y_ini.ncols(),
                blocks.m,
                blocks.output_dim,
                blocks.tini
            )));
        }
        Ok(())
    }
}

/// Arithmetic mean of the head-vehicle velocity over the past horizon,
/// used as the online equilibrium-velocity estimate.
pub fn estimate_equilibrium_velocity(head_velocity_history: &[f64]) -> Result<f64> {
    if head_velocity_history.is_empty() {
        return Err(Error::InsufficientData { required: 1, actual: 0 });
    }
    Ok(head_velocity_history.iter().sum::<f64>() / head_velocity_history.len() as f64)
}

/// Flatten a `channels x steps` matrix into the stacked time-major vector
/// `col(w(0), w(1), ...)` used by the Hankel equations.
fn stack_columns(mat: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(mat.nrows() * mat.ncols());
    for c in 0..mat.ncols() {
        for r in 0..mat.nrows() {
            out[c * mat.nrows() + r] = mat[(r, c)];
        }
    }
    out
}

/// Shape metadata of a condensed program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondensationMeta {
    /// Length of the decision vector g.
    pub num_g: usize,
    /// Equality rows.
    pub num_equalities: usize,
    /// One-sided inequality count (each boxed row contributes two).
    pub num_inequalities: usize,
}

/// The optimization problem in `g` alone, with the decision variables `u`,
/// `y` and the past-output slack eliminated through the data equations.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedQp {
    pub problem: QpProblem,
    pub meta: CondensationMeta,
}

/// Constant-per-dataset pieces of the condensed program: the Hessian, the
/// stacked constraint matrix and the bound templates. Only the linear cost
/// and the equality right-hand sides move between control steps.
struct CondensedStructure {
    hessian: DMatrix<f64>,
    constraints: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    num_eq: usize,
    meta: CondensationMeta,
}

impl CondensedStructure {
    fn new(blocks: &HankelBlocks, params: &ControllerParams) -> Result<Self> {
        let l_dim = blocks.columns();
        let m = blocks.m;
        let p = blocks.output_dim;
        let n = p - m;
        let tini = blocks.tini;
        let horizon = blocks.horizon;
        if tini != params.tini || horizon != params.horizon {
            return Err(Error::DimensionMismatch(format!(
                "blocks partitioned for (tini, horizon) = ({tini}, {horizon}), controller wants ({}, {})",
                params.tini, params.horizon
            )));
        }

        // Hessian: 2 (Yf' Qbar Yf + Uf' Rbar Uf + lambda_g I [+ lambda_y Yp' Yp]).
        let mut weighted_yf = blocks.yf.clone();
        for k in 0..horizon {
            for j in 0..p {
                let w = if j < n { params.weight_velocity } else { params.weight_spacing };
                weighted_yf.row_mut(k * p + j).scale_mut(w.sqrt());
            }
        }
        let mut hessian = weighted_yf.tr_mul(&weighted_yf);
        let mut weighted_uf = blocks.uf.clone();
        weighted_uf.scale_mut(params.weight_input.sqrt());
        hessian += weighted_uf.tr_mul(&weighted_uf);
        if params.past_output == PastOutputHandling::Slack {
            let mut weighted_yp = blocks.yp.clone();
            weighted_yp.scale_mut(params.lambda_y.sqrt());
            hessian += weighted_yp.tr_mul(&weighted_yp);
        }
        for i in 0..l_dim {
            hessian[(i, i)] += params.lambda_g;
        }
        hessian *= 2.0;

        let hard = params.past_output == PastOutputHandling::HardEquality;
        let num_eq = m * tini + tini + horizon + if hard { p * tini } else { 0 };
        let num_ineq_rows = 2 * m * horizon;
        let rows = num_eq + num_ineq_rows;

        let mut constraints = DMatrix::zeros(rows, l_dim);
        let mut cursor = 0;
        constraints
            .view_mut((cursor, 0), (m * tini, l_dim))
            .copy_from(&blocks.up);
        cursor += m * tini;
        constraints
            .view_mut((cursor, 0), (tini, l_dim))
            .copy_from(&blocks.ep);
        cursor += tini;
        constraints
            .view_mut((cursor, 0), (horizon, l_dim))
            .copy_from(&blocks.ef);
        cursor += horizon;
        if hard {
            constraints
                .view_mut((cursor, 0), (p * tini, l_dim))
                .copy_from(&blocks.yp);
            cursor += p * tini;
        }
        constraints
            .view_mut((cursor, 0), (m * horizon, l_dim))
            .copy_from(&blocks.uf);
        cursor += m * horizon;
        for k in 0..horizon {
            for j in 0..m {
                constraints
                    .row_mut(cursor + k * m + j)
                    .copy_from(&blocks.yf.row(k * p + n + j));
            }
        }

        let mut lower = DVector::zeros(rows);
        let mut upper = DVector::zeros(rows);
        for i in num_eq..num_eq + m * horizon {
            lower[i] = params.accel_min;
            upper[i] = params.accel_max;
        }
        for i in num_eq + m * horizon..rows {
            lower[i] = params.spacing_error_min;
            upper[i] = params.spacing_error_max;
        }

        Ok(CondensedStructure {
            hessian,
            constraints,
            lower,
            upper,
            num_eq,
            meta: CondensationMeta {
                num_g: l_dim,
                num_equalities: num_eq,
                num_inequalities: 2 * num_ineq_rows,
            },
        })
    }

    fn equality_rhs(&self, blocks: &HankelBlocks, params: &ControllerParams, window: &OnlineWindow) -> DVector<f64> {
        let mut rhs = DVector::zeros(self.num_eq);
        let u_vec = stack_columns(&window.u_ini);
        rhs.rows_mut(0, u_vec.len()).copy_from(&u_vec);
        let mut cursor = u_vec.len();
        rhs.rows_mut(cursor, window.eps_ini.len())
            .copy_from(&window.eps_ini);
        cursor += window.eps_ini.len();
        // Future head-vehicle velocity error pinned to zero.
        cursor += params.horizon;
        if params.past_output == PastOutputHandling::HardEquality {
            let y_vec = stack_columns(&window.y_ini);
            rhs.rows_mut(cursor, y_vec.len()).copy_from(&y_vec);
        }
        let _ = blocks;
        rhs
    }

    fn linear_cost(&self, blocks: &HankelBlocks, params: &ControllerParams, window: &OnlineWindow) -> DVector<f64> {
        match params.past_output {
            PastOutputHandling::Slack => {
                let y_vec = stack_columns(&window.y_ini);
                blocks.yp.tr_mul(&y_vec) * (-2.0 * params.lambda_y)
            }
            PastOutputHandling::HardEquality => DVector::zeros(self.meta.num_g),
        }
    }
}

/// Build the full condensed program for one window.
pub fn build_condensed_qp(
    blocks: &HankelBlocks,
    params: &ControllerParams,
    window: &OnlineWindow,
) -> Result<CondensedQp> {
    window.check_dims(blocks)?;
    let structure = CondensedStructure::new(blocks, params)?;
    let q = structure.linear_cost(blocks, params, window);
    let rhs = structure.equality_rhs(blocks, params, window);
    let mut lower = structure.lower.clone();
    let mut upper = structure.upper.clone();
    for i in 0..structure.num_eq {
        lower[i] = rhs[i];
        upper[i] = rhs[i];
    }
    Ok(CondensedQp {
        problem: QpProblem {
            p: structure.hessian.clone(),
            q,
            a: structure.constraints.clone(),
            l: lower,
            u: upper,
        },
        meta: structure.meta,
    })
}

/// Result of one predictive solve, mapped back to trajectory space.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub g: DVector<f64>,
    /// Planned CAV inputs, `m x horizon`.
    pub u_star: DMatrix<f64>,
    /// Predicted outputs, `(n + m) x horizon`.
    pub y_star: DMatrix<f64>,
    /// Past-output slack, zero in the hard-equality mode only if the data
    /// is consistent.
    pub sigma_y: DVector<f64>,
    pub objective: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    pub status: QpStatus,
}

fn extract_solution(
    blocks: &HankelBlocks,
    params: &ControllerParams,
    window: &OnlineWindow,
    result: &QpResult,
) -> QpSolution {
    let m = blocks.m;
    let p = blocks.output_dim;
    let n = p - m;
    let horizon = blocks.horizon;
    let g = result.x.clone();

    let u_flat = &blocks.uf * &g;
    let y_flat = &blocks.yf * &g;
    let mut u_star = DMatrix::zeros(m, horizon);
    let mut y_star = DMatrix::zeros(p, horizon);
    for k in 0..horizon {
        for j in 0..m {
            u_star[(j, k)] = u_flat[k * m + j];
        }
        for j in 0..p {
            y_star[(j, k)] = y_flat[k * p + j];
        }
    }
    let sigma_y = &blocks.yp * &g - stack_columns(&window.y_ini);

    let mut objective = params.lambda_g * g.norm_squared();
    if params.past_output == PastOutputHandling::Slack {
        objective += params.lambda_y * sigma_y.norm_squared();
    }
    for k in 0..horizon {
        for j in 0..p {
            let w = if j < n { params.weight_velocity } else { params.weight_spacing };
            objective += w * y_star[(j, k)] * y_star[(j, k)];
        }
        for j in 0..m {
            objective += params.weight_input * u_star[(j, k)] * u_star[(j, k)];
        }
    }

    QpSolution {
        g,
        u_star,
        y_star,
        sigma_y,
        objective,
        kkt_residuals: result.residuals,
        iterations: result.iterations,
        status: result.status,
    }
}

/// One-shot solve of a condensed program (builds a fresh solver).
pub fn solve_qp(
    qp: &CondensedQp,
    blocks: &HankelBlocks,
    params: &ControllerParams,
    window: &OnlineWindow,
) -> Result<QpSolution> {
    let mut solver = QpSolver::new(qp.problem.clone(), params.qp_settings())?;
    let result = solver.solve();
    Ok(extract_solution(blocks, params, window, &result))
}

/// Per-step solver metadata appended to the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub t: f64,
    pub status: String,
    pub iterations: usize,
    pub objective: f64,
    pub norm_g: f64,
    pub norm_sigma_y: f64,
    /// Equilibrium-velocity estimate used at this step.
    pub v_star: f64,
    pub fallback: bool,
}

/// Which equilibrium velocity the online error coordinates are built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumEstimation {
    /// Mean head-vehicle velocity over the past horizon, refreshed every
    /// step.
    WindowMean,
    /// A fixed velocity (for example the collection-time equilibrium).
    Fixed(f64),
}

/// Ring buffer of raw measurements and applied inputs over the past horizon.
pub struct MeasurementHistory {
    capacity: usize,
    head_velocities: VecDeque<f64>,
    velocities: VecDeque<Vec<f64>>,
    cav_spacings: VecDeque<Vec<f64>>,
    inputs: VecDeque<Vec<f64>>,
}

impl MeasurementHistory {
    pub fn new(capacity: usize) -> Self {
        MeasurementHistory {
            capacity,
            head_velocities: VecDeque::with_capacity(capacity),
            velocities: VecDeque::with_capacity(capacity),
            cav_spacings: VecDeque::with_capacity(capacity),
            inputs: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, meas: &Measurement, applied: &[f64]) {
        if self.head_velocities.len() == self.capacity {
            self.head_velocities.pop_front();
            self.velocities.pop_front();
            self.cav_spacings.pop_front();
            self.inputs.pop_front();
        }
        self.head_velocities.push_back(meas.head_velocity);
        self.velocities.push_back(meas.velocities.clone());
        self.cav_spacings.push_back(meas.cav_spacings.clone());
        self.inputs.push_back(applied.to_vec());
    }

    pub fn is_full(&self) -> bool {
        self.head_velocities.len() == self.capacity
    }

    pub fn head_velocity_window(&self) -> Vec<f64> {
        self.head_velocities.iter().copied().collect()
    }

    /// Convert the raw window into error coordinates around the given
    /// equilibrium velocity and CAV spacing.
    pub fn window(&self, v_star: f64, cav_eq_spacing: f64) -> OnlineWindow {
        let tini = self.head_velocities.len();
        let n = self.velocities.front().map_or(0, |v| v.len());
        let m = self.inputs.front().map_or(0, |u| u.len());
        let mut u_ini = DMatrix::zeros(m, tini);
        let mut eps_ini = DVector::zeros(tini);
        let mut y_ini = DMatrix::zeros(n + m, tini);
        for (k, ((hv, vel), (sp, inp))) in self
            .head_velocities
            .iter()
            .zip(self.velocities.iter())
            .zip(self.cav_spacings.iter().zip(self.inputs.iter()))
            .enumerate()
        {
            eps_ini[k] = hv - v_star;
            for i in 0..n {
                y_ini[(i, k)] = vel[i] - v_star;
            }
            for j in 0..m {
                y_ini[(n + j, k)] = sp[j] - cav_eq_spacing;
                u_ini[(j, k)] = inp[j];
            }
        }
        OnlineWindow { u_ini, eps_ini, y_ini }
    }
}

/// The predictive controller: owns the Hankel blocks, the condensed-program
/// structure with its cached factorization, and the online history.
pub struct DeepLccController {
    blocks: HankelBlocks,
    params: ControllerParams,
    structure: CondensedStructure,
    solver: QpSolver,
    history: MeasurementHistory,
    cav_eq_spacing: f64,
    eq_estimation: EquilibriumEstimation,
    last_applied: Option<Vec<f64>>,
    pub step_log: Vec<StepMeta>,
    pub solver_failures: usize,
    current_v_star: f64,
}

impl DeepLccController {
    pub fn new(
        blocks: HankelBlocks,
        params: ControllerParams,
        cav_eq_spacing: f64,
        eq_estimation: EquilibriumEstimation,
    ) -> Result<Self> {
        let n = blocks.output_dim - blocks.m;
        params.validate(n)?;
        let structure = CondensedStructure::new(&blocks, &params)?;
        let problem = QpProblem {
            p: structure.hessian.clone(),
            q: DVector::zeros(structure.meta.num_g),
            a: structure.constraints.clone(),
            l: structure.lower.clone(),
            u: structure.upper.clone(),
        };
        let solver = QpSolver::new(problem, params.qp_settings())?;
        let history = MeasurementHistory::new(params.tini);
        Ok(DeepLccController {
            blocks,
            params,
            structure,
            solver,
            history,
            cav_eq_spacing,
            eq_estimation,
            last_applied: None,
            step_log: Vec::new(),
            solver_failures: 0,
            current_v_star: 0.0,
        })
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn blocks(&self) -> &HankelBlocks {
        &self.blocks
    }

    fn clamp_input(&self, u: &mut [f64]) {
        for v in u.iter_mut() {
            *v = v.clamp(self.params.accel_min, self.params.accel_max);
        }
    }

    /// Solve the predictive program for one window and return the input to
    /// apply (first planned step, clamped to the acceleration bounds).
    pub fn deep_lcc_step(&mut self, window: &OnlineWindow) -> Result<(Vec<f64>, QpSolution)> {
        window.check_dims(&self.blocks)?;
        let q = self
            .structure
            .linear_cost(&self.blocks, &self.params, window);
        let rhs = self
            .structure
            .equality_rhs(&self.blocks, &self.params, window);
        let mut lower = self.structure.lower.clone();
        let mut upper = self.structure.upper.clone();
        for i in 0..self.structure.num_eq {
            lower[i] = rhs[i];
            upper[i] = rhs[i];
        }
        self.solver.update_linear_cost(&q)?;
        self.solver.update_bounds(&lower, &upper)?;
        let result = self.solver.solve();
        let solution = extract_solution(&self.blocks, &self.params, window, &result);

        match solution.status {
            QpStatus::Optimal | QpStatus::MaxIterations => {
                let mut applied: Vec<f64> =
                    (0..self.blocks.m).map(|j| solution.u_star[(j, 0)]).collect();
                if applied.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SolverFailure {
                        time: 0.0,
                        reason: "non-finite input from QP".into(),
                    });
                }
                self.clamp_input(&mut applied);
                Ok((applied, solution))
            }
            QpStatus::PrimalInfeasible | QpStatus::DualInfeasible => Err(Error::SolverFailure {
                time: 0.0,
                reason: format!("QP {:?} after {} iterations", solution.status, solution.iterations),
            }),
        }
    }
}

/// Close the loop between the data-driven controller and the nonlinear
/// platoon: build the controller from the Hankel blocks, run the scenario,
/// and return the trajectory log together with the per-step solver metadata.
pub fn run_receding_horizon(
    cfg: &crate::vehicle::PlatoonConfig,
    blocks: HankelBlocks,
    params: ControllerParams,
    head: &dyn crate::vehicle::HeadMotion,
    duration: f64,
    seed: u64,
) -> Result<(crate::trajectory::TrajectoryLog, Vec<StepMeta>)> {
    if blocks.output_dim != cfg.n + cfg.m() || blocks.m != cfg.m() {
        return Err(Error::DimensionMismatch(format!(
            "blocks built for (n + m, m) = ({}, {}), platoon has ({}, {})",
            blocks.output_dim,
            blocks.m,
            cfg.n + cfg.m(),
            cfg.m()
        )));
    }
    let mut controller = DeepLccController::new(
        blocks,
        params,
        cfg.cav_eq_spacing,
        EquilibriumEstimation::WindowMean,
    )?;
    let log = crate::vehicle::simulate_closed_loop(cfg, &mut controller, head, duration, seed)?;
    Ok((log, controller.step_log))
}

impl ControlPolicy for DeepLccController {
    fn control(&mut self, meas: &Measurement) -> Result<Vec<f64>> {
        let m = self.blocks.m;
        if meas.cav_spacings.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "measurement has {} CAV spacings, blocks expect {m}",
                meas.cav_spacings.len()
            )));
        }

        // Warm-up: apply zero input until the past window is filled.
        if !self.history.is_full() {
            let applied = vec![0.0; m];
            self.history.push(meas, &applied);
            return Ok(applied);
        }

        let v_star = match self.eq_estimation {
            EquilibriumEstimation::WindowMean => {
                estimate_equilibrium_velocity(&self.history.head_velocity_window())?
            }
            EquilibriumEstimation::Fixed(v) => v,
        };
        self.current_v_star = v_star;
        let window = self.history.window(v_star, self.cav_eq_spacing);

        let (applied, meta) = match self.deep_lcc_step(&window) {
            Ok((applied, solution)) => {
                self.last_applied = Some(applied.clone());
                let meta = StepMeta {
                    t: meas.time,
                    status: format!("{:?}", solution.status),
                    iterations: solution.iterations,
                    objective: solution.objective,
                    norm_g: solution.g.norm(),
                    norm_sigma_y: solution.sigma_y.norm(),
                    v_star,
                    fallback: false,
                };
                (applied, meta)
            }
            Err(Error::SolverFailure { reason, .. }) => {
                // Hold the previous input for one step, then fall back to
                // zero; the failure is counted, not fatal.
                self.solver_failures += 1;
                let applied = self.last_applied.take().unwrap_or_else(|| vec![0.0; m]);
                let meta = StepMeta {
                    t: meas.time,
                    status: format!("fallback: {reason}"),
                    iterations: 0,
                    objective: f64::NAN,
                    norm_g: f64::NAN,
                    norm_sigma_y: f64::NAN,
                    v_star,
                    fallback: true,
                };
                (applied, meta)
            }
            Err(other) => return Err(other),
        };
        self.step_log.push(meta);
        self.history.push(meas, &applied);
        Ok(applied)
    }
}
