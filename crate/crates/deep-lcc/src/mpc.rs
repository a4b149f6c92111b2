//! Output-feedback model predictive control with the known discretized
//! linear model, used as the head-to-head baseline. State reconstruction is
//! windowed least squares over the same past horizon the data-driven
//! controller sees, so both act on one information set.

use nalgebra::{DMatrix, DVector};

use crate::controller::{
    estimate_equilibrium_velocity, ControllerParams, EquilibriumEstimation, MeasurementHistory,
    OnlineWindow, StepMeta,
};
use crate::error::{Error, Result};
use crate::model::DiscreteModel;
use crate::qp::{QpProblem, QpResult, QpSettings, QpSolver, QpStatus};
use crate::vehicle::{ControlPolicy, Measurement};

/// MPC tuning: the controller horizons, weights and bounds minus the
/// data-driven regularizers, plus the reconstruction ridge.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcParams {
    pub tini: usize,
    pub horizon: usize,
    pub weight_velocity: f64,
    pub weight_spacing: f64,
    pub weight_input: f64,
    pub spacing_error_min: f64,
    pub spacing_error_max: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub qp_polish: bool,
    /// Ridge added to the reconstruction normal matrix when it is
    /// ill-conditioned.
    pub ridge: f64,
}

impl From<&ControllerParams> for MpcParams {
    fn from(p: &ControllerParams) -> Self {
        MpcParams {
            tini: p.tini,
            horizon: p.horizon,
            weight_velocity: p.weight_velocity,
            weight_spacing: p.weight_spacing,
            weight_input: p.weight_input,
            spacing_error_min: p.spacing_error_min,
            spacing_error_max: p.spacing_error_max,
            accel_min: p.accel_min,
            accel_max: p.accel_max,
            qp_tol: p.qp_tol,
            qp_max_iter: p.qp_max_iter,
            qp_polish: p.qp_polish,
            ridge: 1e-8,
        }
    }
}

impl MpcParams {
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

/// Reconstruct the current state from the past window by least squares.
///
/// The window outputs satisfy `y(k) = C A^k x0 + known input convolution`;
/// fitting `x0` over the observability stack and propagating forward with
/// the recorded inputs yields the state at the current instant. A ridge is
/// added only when the stack is ill-conditioned, so exact windows
/// reconstruct exactly.
pub fn reconstruct_state(
    model: &DiscreteModel,
    window: &OnlineWindow,
    ridge: f64,
) -> Result<DVector<f64>> {
    let tini = window.tini();
    let dim = model.state_dim();
    let p = model.output_dim();
    if window.u_ini.nrows() != model.m() || window.y_ini.nrows() != p {
        return Err(Error::DimensionMismatch(
            "window channels do not match the model".into(),
        ));
    }
    if p * tini < dim {
        return Err(Error::InsufficientData {
            required: dim.div_ceil(p),
            actual: tini,
        });
    }

    // Observability stack and the input-convolution samples.
    let mut obs = DMatrix::zeros(p * tini, dim);
    let mut free_response = DVector::zeros(p * tini);
    let mut a_pow = DMatrix::identity(dim, dim);
    let mut conv = DVector::zeros(dim);
    for k in 0..tini {
        obs.view_mut((k * p, 0), (p, dim))
            .copy_from(&(&model.c_d * &a_pow));
        let y_conv = &model.c_d * &conv;
        for j in 0..p {
            free_response[k * p + j] = window.y_ini[(j, k)] - y_conv[j];
        }
        let u_k = window.u_ini.column(k).into_owned();
        conv = &model.a_d * &conv + &model.b_d * &u_k + &model.h_d * window.eps_ini[k];
        a_pow = &model.a_d * &a_pow;
    }

    let svd = obs.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let sigma_min = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let rank_tol = (p * tini).max(dim) as f64 * sigma_max * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > rank_tol).count();
    if rank < dim {
        return Err(Error::UnobservableModel(format!(
            "observability stack rank {rank} < {dim}; the platoon linearization violates the \
             chain controllability condition"
        )));
    }

    let x0 = if sigma_min > 1e-8 * sigma_max || ridge == 0.0 {
        svd.solve(&free_response, rank_tol)
            .map_err(|e| Error::UnobservableModel(e.to_string()))?
    } else {
        let normal = obs.tr_mul(&obs) + DMatrix::identity(dim, dim) * ridge;
        let rhs = obs.tr_mul(&free_response);
        normal
            .cholesky()
            .ok_or_else(|| Error::UnobservableModel("ridge normal matrix not PD".into()))?
            .solve(&rhs)
    };

    // Forward-propagate to the current instant: x0 already absorbed the
    // window inputs into `conv` and `a_pow` above.
    Ok(&a_pow * x0 + conv)
}

/// Output-feedback MPC sharing the measurement pipeline and QP machinery of
/// the data-driven controller.
pub struct MpcController {
    model: DiscreteModel,
    params: MpcParams,
    /// Free-response map `x -> col(y(t..t+N-1))`.
    phi: DMatrix<f64>,
    /// Forced-response map `col(u) -> col(y)`.
    gamma: DMatrix<f64>,
    /// Rows of phi/gamma selecting the CAV spacing errors.
    phi_sp: DMatrix<f64>,
    solver: QpSolver,
    history: MeasurementHistory,
    cav_eq_spacing: f64,
    eq_estimation: EquilibriumEstimation,
    last_applied: Option<Vec<f64>>,
    pub step_log: Vec<StepMeta>,
    pub solver_failures: usize,
    num_spacing_rows: usize,
}

impl MpcController {
    pub fn new(
        model: DiscreteModel,
        params: MpcParams,
        cav_eq_spacing: f64,
        eq_estimation: EquilibriumEstimation,
    ) -> Result<Self> {
        if params.tini < model.state_dim().div_ceil(model.output_dim()) {
            return Err(Error::InvalidConfig(format!(
                "tini = {} too short to reconstruct a {}-dimensional state",
                params.tini,
                model.state_dim()
            )));
        }
        let n_out = model.output_dim();
        let m = model.m();
        let n_veh = model.n;
        let horizon = params.horizon;
        let dim = model.state_dim();

        // Block prediction matrices over the horizon. The first output
        // block is y(t), unaffected by the planned inputs.
        let mut phi = DMatrix::zeros(n_out * horizon, dim);
        let mut gamma = DMatrix::zeros(n_out * horizon, m * horizon);
        let mut a_pow = DMatrix::identity(dim, dim);
        for k in 0..horizon {
            phi.view_mut((k * n_out, 0), (n_out, dim))
                .copy_from(&(&model.c_d * &a_pow));
            a_pow = &model.a_d * &a_pow;
        }
        // gamma block (k, j) = C A^{k-1-j} B for j < k.
        let mut impulse: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
        let mut power_b = model.b_d.clone();
        for _ in 0..horizon {
            impulse.push(&model.c_d * &power_b);
            power_b = &model.a_d * &power_b;
        }
        for k in 1..horizon {
            for j in 0..k {
                gamma
                    .view_mut((k * n_out, j * m), (n_out, m))
                    .copy_from(&impulse[k - 1 - j]);
            }
        }

        // Cost: ||y||_Qbar + ||u||_Rbar condensed onto u.
        let mut wq = DVector::zeros(n_out * horizon);
        for k in 0..horizon {
            for j in 0..n_out {
                wq[k * n_out + j] = if j < n_veh {
                    params.weight_velocity
                } else {
                    params.weight_spacing
                };
            }
        }
        let mut gamma_weighted = gamma.clone();
        for i in 0..gamma.nrows() {
            gamma_weighted.row_mut(i).scale_mut(wq[i].sqrt());
        }
        let mut hessian = gamma_weighted.tr_mul(&gamma_weighted);
        for i in 0..m * horizon {
            hessian[(i, i)] += params.weight_input;
        }
        hessian *= 2.0;

        // Constraints: box on u plus spacing rows of y = phi x + gamma u.
        let num_spacing_rows = m * horizon;
        let mut spacing_gamma = DMatrix::zeros(num_spacing_rows, m * horizon);
        let mut phi_sp = DMatrix::zeros(num_spacing_rows, dim);
        for k in 0..horizon {
            for j in 0..m {
                let src = k * n_out + n_veh + j;
                spacing_gamma.row_mut(k * m + j).copy_from(&gamma.row(src));
                phi_sp.row_mut(k * m + j).copy_from(&phi.row(src));
            }
        }
        let mut constraints = DMatrix::zeros(m * horizon + num_spacing_rows, m * horizon);
        constraints
            .view_mut((0, 0), (m * horizon, m * horizon))
            .copy_from(&DMatrix::identity(m * horizon, m * horizon));
        constraints
            .view_mut((m * horizon, 0), (num_spacing_rows, m * horizon))
            .copy_from(&spacing_gamma);

        let mut lower = DVector::zeros(m * horizon + num_spacing_rows);
        let mut upper = DVector::zeros(m * horizon + num_spacing_rows);
        for i in 0..m * horizon {
            lower[i] = params.accel_min;
            upper[i] = params.accel_max;
        }
        for i in 0..num_spacing_rows {
            lower[m * horizon + i] = params.spacing_error_min;
            upper[m * horizon + i] = params.spacing_error_max;
        }

        let solver = QpSolver::new(
            QpProblem {
                p: hessian,
                q: DVector::zeros(m * horizon),
                a: constraints,
                l: lower,
                u: upper,
            },
            params.qp_settings(),
        )?;

        let tini = params.tini;
        Ok(MpcController {
            model,
            params,
            phi,
            gamma: gamma_weighted,
            phi_sp,
            solver,
            history: MeasurementHistory::new(tini),
            cav_eq_spacing,
            eq_estimation,
            last_applied: None,
            step_log: Vec::new(),
            solver_failures: 0,
            num_spacing_rows,
        })
    }

    pub fn params(&self) -> &MpcParams {
        &self.params
    }

    /// One planning solve from a reconstructed state. Returns the applied
    /// input (first planned step, clamped) and the full plan with the QP
    /// diagnostics.
    pub fn mpc_step(&mut self, x_hat: &DVector<f64>) -> Result<(Vec<f64>, MpcPlan)> {
        let m = self.model.m();
        let horizon = self.params.horizon;

        // Linear cost 2 Gw' (sqrtW phi x); gamma is stored pre-weighted, so
        // weight the free response the same way before the product.
        let mut free = &self.phi * x_hat;
        let n_veh = self.model.n;
        let n_out = self.model.output_dim();
        for k in 0..horizon {
            for j in 0..n_out {
                let w = if j < n_veh {
                    self.params.weight_velocity
                } else {
                    self.params.weight_spacing
                };
                free[k * n_out + j] *= w.sqrt();
            }
        }
        let q = self.gamma.tr_mul(&free) * 2.0;

        // Spacing bounds shifted by the free response of the spacing rows.
        let sp_free = &self.phi_sp * x_hat;
        let rows = m * horizon + self.num_spacing_rows;
        let mut lower = DVector::zeros(rows);
        let mut upper = DVector::zeros(rows);
        for i in 0..m * horizon {
            lower[i] = self.params.accel_min;
            upper[i] = self.params.accel_max;
        }
        for i in 0..self.num_spacing_rows {
            lower[m * horizon + i] = self.params.spacing_error_min - sp_free[i];
            upper[m * horizon + i] = self.params.spacing_error_max - sp_free[i];
        }
        // The first output block is fixed by the state; if it already sits
        // outside the bounds the program is infeasible, same as the
        // data-driven formulation.
        for i in 0..self.num_spacing_rows {
            if lower[m * horizon + i] > upper[m * horizon + i] {
                return Err(Error::SolverFailure {
                    time: 0.0,
                    reason: "spacing bounds infeasible at the current state".into(),
                });
            }
        }

        self.solver.update_linear_cost(&q)?;
        self.solver.update_bounds(&lower, &upper)?;
        let result: QpResult = self.solver.solve();
        match result.status {
            QpStatus::Optimal | QpStatus::MaxIterations => {
                let mut applied: Vec<f64> = (0..m).map(|j| result.x[j]).collect();
                if applied.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SolverFailure {
                        time: 0.0,
                        reason: "non-finite input from QP".into(),
                    });
                }
                for v in applied.iter_mut() {
                    *v = v.clamp(self.params.accel_min, self.params.accel_max);
                }
                let mut u_star = DMatrix::zeros(m, horizon);
                for k in 0..horizon {
                    for j in 0..m {
                        u_star[(j, k)] = result.x[k * m + j];
                    }
                }
                // The QP objective omits the input-independent free-response
                // term; add it back so the plan carries the true cost-to-go.
                let plan = MpcPlan {
                    u_star,
                    objective: result.objective + free.norm_squared(),
                    iterations: result.iterations,
                    status: result.status,
                };
                Ok((applied, plan))
            }
            QpStatus::PrimalInfeasible | QpStatus::DualInfeasible => Err(Error::SolverFailure {
                time: 0.0,
                reason: format!("QP {:?}", result.status),
            }),
        }
    }
}

/// Planned input sequence and solve diagnostics of one MPC step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcPlan {
    pub u_star: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

impl ControlPolicy for MpcController {
    fn control(&mut self, meas: &Measurement) -> Result<Vec<f64>> {
        let m = self.model.m();
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
        let window = self.history.window(v_star, self.cav_eq_spacing);

        let step = reconstruct_state(&self.model, &window, self.params.ridge)
            .and_then(|x_hat| self.mpc_step(&x_hat));
        let (applied, meta) = match step {
            Ok((applied, plan)) => {
                self.last_applied = Some(applied.clone());
                let meta = StepMeta {
                    t: meas.time,
                    status: format!("{:?}", plan.status),
                    iterations: plan.iterations,
                    objective: plan.objective,
                    norm_g: 0.0,
                    norm_sigma_y: 0.0,
                    v_star,
                    fallback: false,
                };
                (applied, meta)
            }
            Err(Error::SolverFailure { reason, .. }) => {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, discretize, model_from_platoon, LinearizationCoeffs};
    use crate::vehicle::{OvmParams, PlatoonConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::BTreeMap;

    fn model_n2() -> DiscreteModel {
        let cfg = PlatoonConfig::uniform(2, vec![1], OvmParams::nominal(), 0.05, 0.01, 0.0).unwrap();
        discretize(&model_from_platoon(&cfg, 15.0).unwrap(), 0.05).unwrap()
    }

    fn windowed_rollout(model: &DiscreteModel, tini: usize, seed: u64) -> (OnlineWindow, DVector<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let m = model.m();
        let mut x = DVector::from_fn(model.state_dim(), |_, _| rng.random_range(-1.0..=1.0));
        let mut window = OnlineWindow::zeros(m, model.output_dim(), tini);
        for k in 0..tini {
            window.y_ini.set_column(k, &model.output(&x));
            let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0));
            let eps: f64 = rng.random_range(-1.0..=1.0);
            for j in 0..m {
                window.u_ini[(j, k)] = u[j];
            }
            window.eps_ini[k] = eps;
            x = model.step(&x, &u, eps);
        }
        (window, x)
    }

    #[test]
    fn noise_free_window_reconstructs_exactly() {
        let model = model_n2();
        let (window, x_true) = windowed_rollout(&model, 8, 17);
        let x_hat = reconstruct_state(&model, &window, 1e-8).unwrap();
        assert!((x_hat - x_true).amax() < 1e-8);
    }

    #[test]
    fn zero_window_reconstructs_zero() {
        let model = model_n2();
        let window = OnlineWindow::zeros(1, 3, 8);
        let x_hat = reconstruct_state(&model, &window, 1e-8).unwrap();
        assert!(x_hat.amax() < 1e-12);
    }

    #[test]
    fn reconstruction_is_linear_in_the_window() {
        let model = model_n2();
        let (window, _) = windowed_rollout(&model, 8, 23);
        let x_a = reconstruct_state(&model, &window, 0.0).unwrap();
        let mut shifted = window.clone();
        // Add a constant offset to every velocity output; linearity maps it
        // through the same least-squares operator.
        let mut offset_window = OnlineWindow::zeros(1, 3, 8);
        for k in 0..8 {
            for j in 0..2 {
                offset_window.y_ini[(j, k)] = 0.5;
            }
        }
        for k in 0..8 {
            for j in 0..3 {
                shifted.y_ini[(j, k)] += offset_window.y_ini[(j, k)];
            }
        }
        let x_b = reconstruct_state(&model, &shifted, 0.0).unwrap();
        let x_off = reconstruct_state(&model, &offset_window, 0.0).unwrap();
        assert!((x_b - &x_a - x_off).amax() < 1e-8);
    }

    #[test]
    fn reconstruction_error_scales_linearly_with_noise() {
        let model = model_n2();
        let (window, _) = windowed_rollout(&model, 8, 29);
        let x_clean = reconstruct_state(&model, &window, 0.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let direction = DMatrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..=1.0));
        let mut errs = Vec::new();
        for amp in [0.01, 0.05, 0.1] {
            let mut noisy = window.clone();
            for k in 0..8 {
                for j in 0..3 {
                    noisy.y_ini[(j, k)] += amp * direction[(j, k)];
                }
            }
            let x_noisy = reconstruct_state(&model, &noisy, 0.0).unwrap();
            errs.push((x_noisy - &x_clean).amax());
        }
        assert_abs_diff_eq!(errs[2] / errs[0], 10.0, epsilon = 1e-6);
        assert_abs_diff_eq!(errs[1] / errs[0], 5.0, epsilon = 1e-6);
    }

    #[test]
    fn unobservable_linearization_is_rejected() {
        // alpha1 = 0 removes the spacing feedback of the HDV, making its
        // spacing error invisible to the output map.
        let cfg = PlatoonConfig::uniform(2, vec![1], OvmParams::nominal(), 0.05, 0.01, 0.0).unwrap();
        let coeffs: BTreeMap<usize, LinearizationCoeffs> = [(2usize, LinearizationCoeffs {
            alpha1: 0.0,
            alpha2: 1.5,
            alpha3: 0.9,
        })]
        .into_iter()
        .collect();
        let model = discretize(&build_model(&cfg, &coeffs, 15.0).unwrap(), 0.05).unwrap();
        let (window, _) = windowed_rollout(&model, 8, 31);
        assert!(matches!(
            reconstruct_state(&model, &window, 1e-8),
            Err(Error::UnobservableModel(_))
        ));
    }

    #[test]
    fn zero_state_yields_zero_input() {
        let model = model_n2();
        let params = MpcParams::from(&ControllerParams {
            tini: 8,
            horizon: 10,
            ..ControllerParams::experiment_defaults()
        });
        let mut mpc = MpcController::new(model, params, 20.0, EquilibriumEstimation::Fixed(15.0)).unwrap();
        let (applied, plan) = mpc.mpc_step(&DVector::zeros(4)).unwrap();
        assert_eq!(plan.status, QpStatus::Optimal);
        assert_abs_diff_eq!(applied[0], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn positive_velocity_error_commands_braking() {
        let model = model_n2();
        let params = MpcParams::from(&ControllerParams {
            tini: 8,
            horizon: 10,
            ..ControllerParams::experiment_defaults()
        });
        let mut mpc = MpcController::new(model, params, 20.0, EquilibriumEstimation::Fixed(15.0)).unwrap();
        // CAV running 1 m/s above equilibrium: slow down.
        let x = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        let (applied, _) = mpc.mpc_step(&x).unwrap();
        assert!(applied[0] < 0.0);
    }
}
