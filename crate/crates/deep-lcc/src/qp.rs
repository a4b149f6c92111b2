//! Dense convex QP solver for problems of the form
//!
//! ```text
//!     minimize   1/2 x' P x + q' x
//!     subject to l <= A x <= u
//! ```
//!
//! with `l_i = u_i` encoding equality rows. The method is operator splitting
//! (ADMM) with Ruiz equilibration, a cached Cholesky factorization of the
//! reduced KKT matrix, optional adaptive step-size, and an active-set polish
//! that refines the returned point to tight KKT residuals. The receding-
//! horizon controllers re-solve the same problem shape with new linear terms
//! and bounds every step, so the factorization is reused across solves and
//! iterates warm-start from the previous solution.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem data. Equality constraints are rows with `l == u`; one-sided rows
/// use `f64::NEG_INFINITY` / `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn num_vars(&self) -> usize {
        self.p.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.p.nrows();
        if self.p.ncols() != n || self.q.len() != n || self.a.ncols() != n {
            return Err(Error::DimensionMismatch(
                "QP cost and constraint matrices disagree on the variable count".into(),
            ));
        }
        let m = self.a.nrows();
        if self.l.len() != m || self.u.len() != m {
            return Err(Error::DimensionMismatch(
                "QP bound vectors disagree with the constraint row count".into(),
            ));
        }
        for i in 0..m {
            if self.l[i] > self.u[i] {
                return Err(Error::InvalidConfig(format!(
                    "QP bounds crossed at row {i}: l = {} > u = {}",
                    self.l[i], self.u[i]
                )));
            }
        }
        if self.p.iter().any(|x| !x.is_finite()) || self.q.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("QP cost contains non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    /// Base ADMM step size; equality rows use `rho * rho_eq_scale`.
    pub rho: f64,
    pub rho_eq_scale: f64,
    /// Proximal regularization added to the Hessian in the KKT system.
    pub sigma: f64,
    /// Over-relaxation parameter.
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Threshold for the primal/dual infeasibility certificates.
    pub eps_infeas: f64,
    pub max_iter: usize,
    /// Residuals are checked every this many iterations.
    pub check_interval: usize,
    pub adaptive_rho: bool,
    /// Refine the solution on the identified active set after convergence.
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            rho_eq_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeas: 1e-7,
            max_iter: 20_000,
            check_interval: 25,
            adaptive_rho: true,
            polish: true,
        }
    }
}

impl QpSettings {
    /// Settings with both absolute and relative KKT tolerances set to `tol`.
    pub fn with_tolerance(tol: f64) -> Self {
        QpSettings {
            eps_abs: tol,
            eps_rel: tol,
            ..QpSettings::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `max(0, l - Ax, Ax - u)` in the infinity norm.
    pub primal: f64,
    /// `||P x + q + A' y||_inf`.
    pub dual: f64,
    /// Complementarity mismatch `|y' A x - (u' y+ + l' y-)|`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub x: DVector<f64>,
    /// Lagrange multipliers of the constraint rows (positive at upper
    /// bounds, negative at lower bounds).
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
    pub objective: f64,
    pub polished: bool,
    /// Norm ratio `||A' dy|| / ||dy||` of the infeasibility certificate,
    /// when one was found.
    pub certificate: Option<f64>,
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

/// Residual `rhs - K sol` with compensated (error-free transformation)
/// accumulation. Badly scaled Hessians cancel catastrophically in plain
/// arithmetic; the doubled-precision residual lets iterative refinement
/// recover the weakly determined solution components.
fn compensated_residual(k: &DMatrix<f64>, sol: &DVector<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = k.nrows();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut sum = rhs[i];
        let mut comp = 0.0f64;
        for j in 0..k.ncols() {
            let a = -k[(i, j)];
            let b = sol[j];
            let prod = a * b;
            let prod_err = a.mul_add(b, -prod);
            // Two-sum of `sum` and `prod`.
            let s = sum + prod;
            let bb = s - sum;
            let err = (sum - (s - bb)) + (prod - bb);
            sum = s;
            comp += err + prod_err;
        }
        out[i] = sum + comp;
    }
    out
}

/// Ruiz equilibration of the stacked KKT matrix plus cost normalization.
fn ruiz_scaling(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>) -> Scaling {
    let n = p.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut cost = 1.0;

    let mut ps = p.clone();
    let mut qs = q.clone();
    let mut as_ = a.clone();

    for _ in 0..10 {
        let mut delta_d = DVector::from_element(n, 1.0);
        for j in 0..n {
            let col_p = ps.column(j).amax();
            let col_a = if m > 0 { as_.column(j).amax() } else { 0.0 };
            let norm = col_p.max(col_a);
            if norm > 1e-12 {
                delta_d[j] = 1.0 / norm.sqrt();
            }
        }
        let mut delta_e = DVector::from_element(m, 1.0);
        for i in 0..m {
            let norm = as_.row(i).amax();
            if norm > 1e-12 {
                delta_e[i] = 1.0 / norm.sqrt();
            }
        }
        for j in 0..n {
            for i in 0..n {
                ps[(i, j)] *= delta_d[i] * delta_d[j];
            }
            qs[j] *= delta_d[j];
        }
        for i in 0..m {
            for j in 0..n {
                as_[(i, j)] *= delta_e[i] * delta_d[j];
            }
        }
        d.component_mul_assign(&delta_d);
        e.component_mul_assign(&delta_e);

        // Normalize the cost so the Hessian and gradient are O(1).
        let mean_col: f64 = if n > 0 {
            (0..n).map(|j| ps.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let gamma_inv = mean_col.max(qs.amax()).max(1e-12);
        let gamma = 1.0 / gamma_inv;
        ps *= gamma;
        qs *= gamma;
        cost *= gamma;

        let spread = delta_d
            .iter()
            .chain(delta_e.iter())
            .fold(0.0f64, |acc, &v| acc.max((1.0 - v).abs()));
        if spread < 1e-3 {
            break;
        }
    }

    Scaling { d, e, cost }
}

/// Dense QP solver with cached factorization. Create once per problem
/// structure, then update the linear cost and bounds between solves.
pub struct QpSolver {
    // Original (unscaled) data, used for termination checks and polishing.
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    // Equilibrated data the iteration runs on.
    ps: DMatrix<f64>,
    qs: DVector<f64>,
    as_: DMatrix<f64>,
    ls: DVector<f64>,
    us: DVector<f64>,
    scaling: Scaling,
    rho: DVector<f64>,
    rho_base: f64,
    chol: Cholesky<f64, Dyn>,
    // Warm-started iterates in the scaled space.
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    pub settings: QpSettings,
    factorizations: usize,
}

impl QpSolver {
    pub fn new(problem: QpProblem, settings: QpSettings) -> Result<Self> {
        problem.validate()?;
        let QpProblem { p, q, a, l, u } = problem;
        let n = p.nrows();
        let m = a.nrows();

        let scaling = ruiz_scaling(&p, &q, &a);
        let mut ps = p.clone();
        let mut qs = q.clone();
        let mut as_ = a.clone();
        for j in 0..n {
            for i in 0..n {
                ps[(i, j)] *= scaling.d[i] * scaling.d[j];
            }
            qs[j] *= scaling.d[j];
        }
        ps *= scaling.cost;
        qs *= scaling.cost;
        for i in 0..m {
            for j in 0..n {
                as_[(i, j)] *= scaling.e[i] * scaling.d[j];
            }
        }
        let ls = DVector::from_fn(m, |i, _| scaling.e[i] * l[i]);
        let us = DVector::from_fn(m, |i, _| scaling.e[i] * u[i]);

        let rho_base = settings.rho;
        let rho = DVector::from_fn(m, |i, _| {
            if l[i] == u[i] && l[i].is_finite() {
                rho_base * settings.rho_eq_scale
            } else {
                rho_base
            }
        });

        let mut solver = QpSolver {
            p,
            q,
            a,
            l,
            u,
            ps,
            qs,
            as_,
            ls,
            us,
            scaling,
            rho,
            rho_base,
            chol: Cholesky::new(DMatrix::identity(1, 1)).expect("identity is PD"),
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            y: DVector::zeros(m),
            settings,
            factorizations: 0,
        };
        solver.factorize()?;
        Ok(solver)
    }

    fn factorize(&mut self) -> Result<()> {
        let n = self.ps.nrows();
        // M = P + sigma I + A' diag(rho) A in the scaled space.
        let mut m_mat = self.ps.clone();
        for i in 0..n {
            m_mat[(i, i)] += self.settings.sigma;
        }
        let mut weighted = self.as_.clone();
        for i in 0..weighted.nrows() {
            let r = self.rho[i];
            weighted.row_mut(i).scale_mut(r);
        }
        m_mat += self.as_.transpose() * weighted;
        self.chol = Cholesky::new(m_mat).ok_or_else(|| {
            Error::InvalidConfig("QP reduced KKT matrix is not positive definite".into())
        })?;
        self.factorizations += 1;
        Ok(())
    }

    /// Replace the linear cost term. Keeps the factorization and iterates.
    pub fn update_linear_cost(&mut self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.q.len() {
            return Err(Error::DimensionMismatch("linear cost length changed".into()));
        }
        self.q = q.clone();
        self.qs = DVector::from_fn(q.len(), |j, _| {
            q[j] * self.scaling.d[j] * self.scaling.cost
        });
        Ok(())
    }

    /// Replace the bounds. Refactorizes only if a row switched between
    /// equality and inequality, which changes its step size.
    pub fn update_bounds(&mut self, l: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let m = self.a.nrows();
        if l.len() != m || u.len() != m {
            return Err(Error::DimensionMismatch("bounds length changed".into()));
        }
        for i in 0..m {
            if l[i] > u[i] {
                return Err(Error::InvalidConfig(format!(
                    "QP bounds crossed at row {i}"
                )));
            }
        }
        let mut need_refactor = false;
        for i in 0..m {
            let was_eq = self.l[i] == self.u[i] && self.l[i].is_finite();
            let is_eq = l[i] == u[i] && l[i].is_finite();
            if was_eq != is_eq {
                self.rho[i] = if is_eq {
                    self.rho_base * self.settings.rho_eq_scale
                } else {
                    self.rho_base
                };
                need_refactor = true;
            }
        }
        self.l = l.clone();
        self.u = u.clone();
        self.ls = DVector::from_fn(m, |i, _| self.scaling.e[i] * l[i]);
        self.us = DVector::from_fn(m, |i, _| self.scaling.e[i] * u[i]);
        if need_refactor {
            self.factorize()?;
        }
        Ok(())
    }

    /// Seed the iterates with an unscaled primal/dual guess.
    pub fn warm_start(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        for j in 0..self.x.len() {
            self.x[j] = x[j] / self.scaling.d[j];
        }
        for i in 0..self.y.len() {
            self.y[i] = y[i] * self.scaling.cost / self.scaling.e[i];
        }
        self.z = &self.as_ * &self.x;
    }

    /// Reset the iterates to zero (cold start).
    pub fn reset(&mut self) {
        self.x.fill(0.0);
        self.z.fill(0.0);
        self.y.fill(0.0);
    }

    fn unscaled_iterates(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let x = DVector::from_fn(self.x.len(), |j, _| self.x[j] * self.scaling.d[j]);
        let z = DVector::from_fn(self.z.len(), |i, _| self.z[i] / self.scaling.e[i]);
        let y = DVector::from_fn(self.y.len(), |i, _| {
            self.y[i] * self.scaling.e[i] / self.scaling.cost
        });
        (x, z, y)
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x)
    }

    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (KktResiduals, f64, f64) {
        let ax = &self.a * x;
        let px = &self.p * x;
        let aty = self.a.tr_mul(y);

        let r_prim = (&ax - z).amax();
        // Compensated accumulation of P x + q + A' y: the stationarity
        // terms cancel catastrophically when the Hessian carries a large
        // penalty block, and a plain sum cannot see below that noise.
        let n = x.len();
        let mut r_dual = 0.0f64;
        for i in 0..n {
            let mut sum = self.q[i];
            let mut comp = 0.0f64;
            let absorb = |a: f64, b: f64, sum: &mut f64, comp: &mut f64| {
                let prod = a * b;
                let prod_err = a.mul_add(b, -prod);
                let s = *sum + prod;
                let bb = s - *sum;
                let err = (*sum - (s - bb)) + (prod - bb);
                *sum = s;
                *comp += err + prod_err;
            };
            for j in 0..n {
                absorb(self.p[(i, j)], x[j], &mut sum, &mut comp);
            }
            for r in 0..y.len() {
                absorb(self.a[(r, i)], y[r], &mut sum, &mut comp);
            }
            r_dual = r_dual.max((sum + comp).abs());
        }

        let mut gap = 0.0;
        for i in 0..y.len() {
            let bound = if y[i] > 0.0 { self.u[i] } else { self.l[i] };
            if bound.is_finite() {
                gap += y[i] * (ax[i] - bound);
            }
        }

        let eps_prim = self.settings.eps_abs
            + self.settings.eps_rel * ax.amax().max(z.amax());
        let eps_dual = self.settings.eps_abs
            + self.settings.eps_rel * px.amax().max(aty.amax()).max(self.q.amax());

        (
            KktResiduals {
                primal: r_prim,
                dual: r_dual,
                gap: gap.abs(),
            },
            eps_prim,
            eps_dual,
        )
    }

    /// Residual check in the equilibrated space. On badly scaled problems
    /// (huge penalty weights) the unscaled relative criterion is satisfied
    /// by poor iterates because the reference norms blow up; the scaled
    /// criterion keeps the test meaningful there.
    fn scaled_converged(&self) -> bool {
        let ax = &self.as_ * &self.x;
        let r_prim = (&ax - &self.z).amax();
        let eps_prim = self.settings.eps_abs
            + self.settings.eps_rel * ax.amax().max(self.z.amax());
        if r_prim > eps_prim {
            return false;
        }
        let px = &self.ps * &self.x;
        let aty = self.as_.tr_mul(&self.y);
        let mut dual_vec = px.clone();
        dual_vec += &self.qs;
        dual_vec += &aty;
        let r_dual = dual_vec.amax();
        let eps_dual = self.settings.eps_abs
            + self.settings.eps_rel * px.amax().max(aty.amax()).max(self.qs.amax());
        r_dual <= eps_dual
    }

    fn primal_infeasibility_certificate(&self, dy: &DVector<f64>) -> Option<f64> {
        let norm = dy.amax();
        if norm <= 1e-14 {
            return None;
        }
        let eps = self.settings.eps_infeas * norm;
        let at_dy = self.a.tr_mul(dy);
        if at_dy.amax() > eps {
            return None;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            if dy[i] > eps {
                if !self.u[i].is_finite() {
                    return None;
                }
                support += self.u[i] * dy[i];
            } else if dy[i] < -eps {
                if !self.l[i].is_finite() {
                    return None;
                }
                support += self.l[i] * dy[i];
            }
        }
        if support < -eps {
            Some(at_dy.amax() / norm)
        } else {
            None
        }
    }

    fn dual_infeasibility_certificate(&self, dx: &DVector<f64>) -> Option<f64> {
        let norm = dx.amax();
        if norm <= 1e-14 {
            return None;
        }
        let eps = self.settings.eps_infeas * norm;
        if (&self.p * dx).amax() > eps {
            return None;
        }
        if self.q.dot(dx) > -eps {
            return None;
        }
        let adx = &self.a * dx;
        for i in 0..adx.len() {
            let v = adx[i];
            let lower_ok = !self.l[i].is_finite() || v >= -eps;
            let upper_ok = !self.u[i].is_finite() || v <= eps;
            if !(lower_ok && upper_ok) {
                return None;
            }
        }
        Some((&self.p * dx).amax() / norm)
    }

    /// Refine the current point by solving the equality-constrained KKT
    /// system on an active set seeded from the iterate, with a few rounds of
    /// active-set correction: multipliers with the wrong sign leave the set,
    /// violated bounds enter it. The solve runs on the equilibrated data for
    /// conditioning; the result is mapped back to the original space.
    fn polish(&self, y_unscaled: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let m = self.z.len();

        // Working set: per row, pinned at the lower (-1) or upper (+1)
        // bound, or free (0). Equalities are pinned permanently.
        let mut side = vec![0i8; m];
        let y_tol = 1e-9 * y_unscaled.amax().max(1.0);
        for i in 0..m {
            if self.l[i] == self.u[i] && self.l[i].is_finite() {
                side[i] = -1;
                continue;
            }
            let tol_lo = 1e-10 * (1.0 + self.ls[i].abs());
            let tol_hi = 1e-10 * (1.0 + self.us[i].abs());
            if self.l[i].is_finite()
                && self.z[i] - self.ls[i] <= tol_lo
                && y_unscaled[i] < -y_tol
            {
                side[i] = -1;
            } else if self.u[i].is_finite()
                && self.us[i] - self.z[i] <= tol_hi
                && y_unscaled[i] > y_tol
            {
                side[i] = 1;
            }
        }
        let is_eq = |i: usize| self.l[i] == self.u[i] && self.l[i].is_finite();

        let mut best = None;
        for _round in 0..4 {
            let rows: Vec<usize> = (0..m).filter(|&i| side[i] != 0).collect();
            let (x_pol, nu) = self.solve_active_set(&rows, &side)?;

            // Wrong-sign multipliers leave the set (equalities stay).
            let mut changed = false;
            let sign_tol = 1e-12 * nu.amax().max(1.0);
            for (r, &i) in rows.iter().enumerate() {
                if is_eq(i) {
                    continue;
                }
                let wrong = (side[i] == -1 && nu[r] > sign_tol)
                    || (side[i] == 1 && nu[r] < -sign_tol);
                if wrong {
                    side[i] = 0;
                    changed = true;
                }
            }
            // Violated inactive bounds enter the set.
            let ax = &self.a * &x_pol;
            for i in 0..m {
                if side[i] != 0 {
                    continue;
                }
                let tol = 1e-9 * (1.0 + ax[i].abs());
                if self.l[i].is_finite() && ax[i] < self.l[i] - tol {
                    side[i] = -1;
                    changed = true;
                } else if self.u[i].is_finite() && ax[i] > self.u[i] + tol {
                    side[i] = 1;
                    changed = true;
                }
            }

            let mut y_pol = DVector::zeros(m);
            for (r, &i) in rows.iter().enumerate() {
                y_pol[i] = nu[r] * self.scaling.e[i] / self.scaling.cost;
            }
            best = Some((x_pol, y_pol));
            if !changed {
                break;
            }
        }
        best
    }

    /// Equality-constrained KKT solve on the given pinned rows, in the
    /// scaled space, returning the unscaled primal and the scaled
    /// multipliers of the pinned rows.
    ///
    /// A primal-only ridge keeps the system nonsingular even when the
    /// Hessian is rank deficient on the constraint nullspace (the
    /// combination vector is non-unique there); the active rows are
    /// independent whenever the data is persistently exciting. The ridge
    /// trades bias on weakly determined directions against refinement
    /// stability, and the sweet spot depends on the smallest meaningful
    /// curvature, so two levels are tried and the tighter solve wins.
    fn solve_active_set(&self, rows: &[usize], side: &[i8]) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.ps.nrows();
        let k = rows.len();
        let dim = n + k;

        let mut base = DMatrix::zeros(dim, dim);
        base.view_mut((0, 0), (n, n)).copy_from(&self.ps);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..n {
                base[(n + r, j)] = self.as_[(i, j)];
                base[(j, n + r)] = self.as_[(i, j)];
            }
        }
        let mut rhs = DVector::zeros(dim);
        for j in 0..n {
            rhs[j] = -self.qs[j];
        }
        for (r, &i) in rows.iter().enumerate() {
            rhs[n + r] = if side[i] == 1 { self.us[i] } else { self.ls[i] };
        }

        let mut best: Option<(f64, DVector<f64>)> = None;
        for delta in [1e-14, 1e-11] {
            let mut kkt = base.clone();
            for j in 0..n {
                kkt[(j, j)] += delta;
            }
            let mut lu = kkt.clone().lu();
            if !lu.is_invertible() {
                for r in 0..k {
                    kkt[(n + r, n + r)] -= delta;
                }
                lu = kkt.clone().lu();
            }
            let Some(mut sol) = lu.solve(&rhs) else { continue };
            // Extra-precise iterative refinement against the unridged
            // system: the compensated residual sees below the cancellation
            // noise of penalty-dominated Hessians, and each pass contracts
            // the forward error by roughly cond * eps.
            let mut final_resid = f64::INFINITY;
            for _ in 0..12 {
                let resid = compensated_residual(&base, &sol, &rhs);
                final_resid = resid.amax();
                if final_resid < 1e-15 * rhs.amax().max(1.0) {
                    break;
                }
                match lu.solve(&resid) {
                    Some(corr) => sol += corr,
                    None => break,
                }
            }
            if best.as_ref().is_none_or(|(r, _)| final_resid < *r) {
                best = Some((final_resid, sol));
            }
        }
        let (_, sol) = best?;

        let mut x_pol = sol.rows(0, n).into_owned();
        for j in 0..n {
            x_pol[j] *= self.scaling.d[j];
        }
        Some((x_pol, sol.rows(n, k).into_owned()))
    }

    fn violation(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        let mut worst = 0.0f64;
        for i in 0..ax.len() {
            if self.l[i].is_finite() {
                worst = worst.max(self.l[i] - ax[i]);
            }
            if self.u[i].is_finite() {
                worst = worst.max(ax[i] - self.u[i]);
            }
        }
        worst
    }

    /// Run ADMM from the current iterates.
    pub fn solve(&mut self) -> QpResult {
        let m = self.as_.nrows();
        let mut status = QpStatus::MaxIterations;
        let mut iterations = self.settings.max_iter;
        let mut certificate = None;
        let mut last_rho_check = 0usize;

        let mut prev_x = self.x.clone();
        let mut prev_y = self.y.clone();

        for iter in 1..=self.settings.max_iter {
            prev_x.copy_from(&self.x);
            prev_y.copy_from(&self.y);

            // Reduced KKT solve.
            let mut rhs = &self.x * self.settings.sigma - &self.qs;
            let mut weighted = DVector::zeros(m);
            for i in 0..m {
                weighted[i] = self.rho[i] * self.z[i] - self.y[i];
            }
            rhs += self.as_.tr_mul(&weighted);
            let x_tilde = self.chol.solve(&rhs);
            let z_tilde = &self.as_ * &x_tilde;

            let alpha = self.settings.alpha;
            for j in 0..self.x.len() {
                self.x[j] = alpha * x_tilde[j] + (1.0 - alpha) * self.x[j];
            }
            for i in 0..m {
                let w = alpha * z_tilde[i] + (1.0 - alpha) * self.z[i] + self.y[i] / self.rho[i];
                let clamped = w.clamp(self.ls[i], self.us[i]);
                self.y[i] = self.rho[i] * (w - clamped);
                self.z[i] = clamped;
            }

            if iter % self.settings.check_interval == 0 || iter == self.settings.max_iter {
                let (xu, zu, yu) = self.unscaled_iterates();
                let (res, eps_prim, eps_dual) = self.residuals(&xu, &zu, &yu);
                if res.primal <= eps_prim && res.dual <= eps_dual && self.scaled_converged() {
                    status = QpStatus::Optimal;
                    iterations = iter;
                    break;
                }

                // Certificates use one-iteration differences, unscaled.
                let dy = DVector::from_fn(m, |i, _| {
                    (self.y[i] - prev_y[i]) * self.scaling.e[i] / self.scaling.cost
                });
                if let Some(cert) = self.primal_infeasibility_certificate(&dy) {
                    status = QpStatus::PrimalInfeasible;
                    iterations = iter;
                    certificate = Some(cert);
                    break;
                }
                let dx = DVector::from_fn(self.x.len(), |j, _| {
                    (self.x[j] - prev_x[j]) * self.scaling.d[j]
                });
                if let Some(cert) = self.dual_infeasibility_certificate(&dx) {
                    status = QpStatus::DualInfeasible;
                    iterations = iter;
                    certificate = Some(cert);
                    break;
                }

                // Step-size adaptation with bounded refactorization count.
                if self.settings.adaptive_rho && iter >= 2 * last_rho_check + 100 {
                    last_rho_check = iter;
                    let ax_s = (&self.as_ * &self.x).amax();
                    let denom_p = ax_s.max(self.z.amax()).max(1e-12);
                    let px_s = (&self.ps * &self.x).amax();
                    let aty_s = self.as_.tr_mul(&self.y).amax();
                    let denom_d = px_s.max(aty_s).max(self.qs.amax()).max(1e-12);
                    let rp = (&self.as_ * &self.x - &self.z).amax() / denom_p;
                    let mut dual_vec = &self.ps * &self.x + &self.qs;
                    dual_vec += self.as_.tr_mul(&self.y);
                    let rd = dual_vec.amax() / denom_d;
                    let ratio = (rp.max(1e-14) / rd.max(1e-14)).sqrt();
                    if !(0.2..=5.0).contains(&ratio) {
                        let new_base = (self.rho_base * ratio).clamp(1e-6, 1e6);
                        self.rho_base = new_base;
                        for i in 0..m {
                            let is_eq = self.l[i] == self.u[i] && self.l[i].is_finite();
                            self.rho[i] = if is_eq {
                                new_base * self.settings.rho_eq_scale
                            } else {
                                new_base
                            };
                        }
                        if self.factorize().is_err() {
                            break;
                        }
                    }
                }
            }
        }

        let (xu, _zu, yu) = self.unscaled_iterates();
        let mut x_best = xu;
        let mut y_best = yu;
        let (mut res_best, _, _) = self.residuals(&x_best, &(&self.a * &x_best), &y_best);
        res_best.primal = self.violation(&x_best);
        let mut polished = false;

        if self.settings.polish && status == QpStatus::Optimal {
            if let Some((x_pol, y_pol)) = self.polish(&y_best) {
                let (mut res_pol, _, _) =
                    self.residuals(&x_pol, &(&self.a * &x_pol), &y_pol);
                res_pol.primal = self.violation(&x_pol);
                if std::env::var("QP_DEBUG").is_ok() {
                    eprintln!("polish: candidate res ({:.3e},{:.3e}) vs admm ({:.3e},{:.3e})",
                        res_pol.primal, res_pol.dual, res_best.primal, res_best.dual);
                }
                // Accept only candidates that keep feasibility and improve
                // stationarity; a misidentified active set fails here and
                // the splitting iterate stands.
                let feasible_enough =
                    res_pol.primal <= res_best.primal.max(self.settings.eps_abs) + 1e-12;
                if feasible_enough && res_pol.dual <= res_best.dual {
                    x_best = x_pol;
                    y_best = y_pol;
                    res_best = res_pol;
                    polished = true;
                }
            }
        }

        let objective = self.objective(&x_best);
        QpResult {
            objective,
            x: x_best,
            y: y_best,
            status,
            iterations,
            residuals: res_best,
            polished,
            certificate,
        }
    }
}

/// One-shot convenience wrapper: build a solver, solve, return the result.
pub fn solve(problem: QpProblem, settings: QpSettings) -> Result<QpResult> {
    let mut solver = QpSolver::new(problem, settings)?;
    Ok(solver.solve())
}
