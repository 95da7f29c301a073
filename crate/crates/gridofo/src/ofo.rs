//! Feedback-optimization operators: the QP-based update that enforces
//! voltage limits through linearized constraints, the projected-gradient
//! baseline with soft penalties, and the exact-penalty merit function used
//! as a runtime descent observable.
//!
//! Cost is quadratic tracking of a reference, `f(u) = 1/2 ||u - u_ref||^2`;
//! constraints bound the voltage magnitudes of the non-slack buses.
//! Angles carry no constraints.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{clamp_box, GridModel};
use crate::powerflow::{self, flat_start};
use crate::qp::{solve_qp, QpProblem};

/// Controller parameters.
#[derive(Clone, Debug)]
pub struct OfoConfig {
    /// Curvature of the regularizing term `B(u) = eta * I`.
    pub eta: f64,
    /// Reference set-points for the tracking cost.
    pub u_ref: DVector<f64>,
    pub vmin: f64,
    pub vmax: f64,
    /// Penalty weight for the PG baseline and the QP soft relaxation.
    pub zeta: f64,
    /// PG step size; resolved from the measured sensitivity bound when
    /// absent (`alpha = 1 / (1 + zeta * ||Sx_u||^2)`).
    pub alpha: Option<f64>,
    /// Allow slack relaxation of the QP rows when infeasible.
    pub soft_mode: bool,
    /// Optional general positive-definite curvature matrix overriding
    /// `eta * I`.
    pub b_matrix: Option<DMatrix<f64>>,
    /// KKT tolerance handed to the QP solver.
    pub qp_tol: f64,
}

impl OfoConfig {
    pub fn new(eta: f64, u_ref: DVector<f64>, vmin: f64, vmax: f64) -> Result<Self> {
        let cfg = OfoConfig {
            eta,
            u_ref,
            vmin,
            vmax,
            zeta: 1e3,
            alpha: None,
            soft_mode: true,
            b_matrix: None,
            qp_tol: 1e-9,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be positive".into()));
        }
        if !(self.vmin < self.vmax) {
            return Err(Error::Config("vmin must be below vmax".into()));
        }
        if !(self.zeta > 0.0) {
            return Err(Error::Config("zeta must be positive".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::Config("alpha must be positive".into()));
            }
        }
        Ok(())
    }

    /// Measure the PG step size from the sensitivity at an operating
    /// point: `alpha = 1 / (1 + zeta * L_g)` with `L_g = ||Sx_u||_2^2`.
    pub fn resolve_alpha(
        &mut self,
        model: &GridModel,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<f64> {
        if let Some(a) = self.alpha {
            return Ok(a);
        }
        let (sx_u, _) = powerflow::sensitivities(model, x, u, d)?;
        let spectral = sx_u.svd(false, false).singular_values[0];
        let alpha = 1.0 / (1.0 + self.zeta * spectral * spectral);
        self.alpha = Some(alpha);
        Ok(alpha)
    }
}

/// Time-varying problem data seen by the controller:
/// disturbance estimate and actuator box.
#[derive(Clone, Debug)]
pub struct Theta {
    pub d: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

/// Tracking cost `f(u) = 1/2 ||u - u_ref||^2`.
pub fn cost(u: &DVector<f64>, u_ref: &DVector<f64>) -> f64 {
    0.5 * (u - u_ref).norm_squared()
}

/// Voltage constraint values `gbar(x) = [vm - vmax; vmin - vm]`.
pub fn constraint_values(model: &GridModel, x: &DVector<f64>, cfg: &OfoConfig) -> DVector<f64> {
    let m = model.n_buses() - 1;
    DVector::from_fn(2 * m, |i, _| {
        if i < m {
            x[i] - cfg.vmax
        } else {
            cfg.vmin - x[i - m]
        }
    })
}

/// Linearized voltage rows at the operating point `(x, u, d_hat)`:
/// `A * (u+ - u) <= b` with `A = grad_x gbar * Sx_u` and `b = -gbar(x)`.
/// Upper-limit rows come first.
pub fn constraint_rows(
    model: &GridModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d_hat: &DVector<f64>,
    cfg: &OfoConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = model.n_buses() - 1;
    let (sx_u, _) = powerflow::sensitivities(model, x, u, d_hat)?;
    let svm = sx_u.rows(0, m).into_owned();
    let mut a = DMatrix::zeros(2 * m, model.n_inputs());
    a.view_mut((0, 0), (m, model.n_inputs())).copy_from(&svm);
    a.view_mut((m, 0), (m, model.n_inputs())).copy_from(&(-&svm));
    let b = -constraint_values(model, x, cfg);
    Ok((a, b))
}

/// One controller update.
#[derive(Clone, Debug)]
pub struct OfoStep {
    pub u_plus: DVector<f64>,
    /// Largest multiplier among the voltage rows; the merit function's
    /// penalty weight must dominate it for descent to be certified.
    pub max_dual: f64,
    /// True when the step came from the slack-relaxed problem.
    pub relaxed: bool,
}

/// QP operator: minimize the first-order cost model plus a quadratic
/// regularization over the shifted box, subject to the linearized voltage
/// rows. Falls back to an l1 slack relaxation when infeasible and
/// `soft_mode` is set.
pub fn qp_operator(
    model: &GridModel,
    u: &DVector<f64>,
    x: &DVector<f64>,
    theta: &Theta,
    cfg: &OfoConfig,
) -> Result<OfoStep> {
    cfg.validate()?;
    let n_u = model.n_inputs();
    let (a, b) = constraint_rows(model, x, u, &theta.d, cfg)?;
    let h = match &cfg.b_matrix {
        Some(bm) => bm.clone(),
        None => DMatrix::identity(n_u, n_u) * cfg.eta,
    };
    let c = u - &cfg.u_ref;
    let lo = &theta.lo - u;
    let hi = &theta.hi - u;
    let qp = QpProblem {
        h: h.clone(),
        c: c.clone(),
        a: a.clone(),
        b: b.clone(),
        lo: lo.clone(),
        hi: hi.clone(),
    };
    match solve_qp(&qp, cfg.qp_tol) {
        Ok(sol) => Ok(OfoStep {
            u_plus: u + sol.delta,
            max_dual: sol.ineq_duals.iter().cloned().fold(0.0, f64::max),
            relaxed: false,
        }),
        Err(Error::QpInfeasible) if cfg.soft_mode => {
            log::debug!("voltage rows infeasible, re-solving with l1 slack");
            let m_rows = b.len();
            let nt = n_u + m_rows;
            let mut h_ext = DMatrix::zeros(nt, nt);
            h_ext.view_mut((0, 0), (n_u, n_u)).copy_from(&h);
            // unit curvature on the slacks keeps the relaxation strictly
            // convex and well scaled against the l1 weight; slack values
            // are small, so the quadratic term barely shifts the penalty
            for k in 0..m_rows {
                h_ext[(n_u + k, n_u + k)] = 1.0;
            }
            let mut c_ext = DVector::zeros(nt);
            c_ext.rows_mut(0, n_u).copy_from(&c);
            for k in 0..m_rows {
                c_ext[n_u + k] = cfg.zeta;
            }
            let mut a_ext = DMatrix::zeros(m_rows, nt);
            a_ext.view_mut((0, 0), (m_rows, n_u)).copy_from(&a);
            for k in 0..m_rows {
                a_ext[(k, n_u + k)] = -1.0;
            }
            let mut lo_ext = DVector::from_element(nt, 0.0);
            lo_ext.rows_mut(0, n_u).copy_from(&lo);
            let mut hi_ext = DVector::from_element(nt, f64::INFINITY);
            hi_ext.rows_mut(0, n_u).copy_from(&hi);
            let relaxed = QpProblem {
                h: h_ext,
                c: c_ext,
                a: a_ext,
                b,
                lo: lo_ext,
                hi: hi_ext,
            };
            let sol = solve_qp(&relaxed, cfg.qp_tol)?;
            Ok(OfoStep {
                u_plus: u + sol.delta.rows(0, n_u).into_owned(),
                max_dual: sol.ineq_duals.iter().cloned().fold(0.0, f64::max),
                relaxed: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Projected-gradient operator on the soft-penalty objective
/// `f(u) + (zeta/2) sum_i max(gbar_i(x), 0)^2`, with the penalty gradient
/// routed through the solution sensitivity.
pub fn pg_operator(
    model: &GridModel,
    u: &DVector<f64>,
    x: &DVector<f64>,
    theta: &Theta,
    cfg: &OfoConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    let alpha = cfg
        .alpha
        .ok_or_else(|| Error::Config("pg step size unresolved; call resolve_alpha".into()))?;
    let m = model.n_buses() - 1;
    let (sx_u, _) = powerflow::sensitivities(model, x, u, &theta.d)?;
    // grad_x of (1/2) sum max(gbar, 0)^2: upper rows push vm down, lower up
    let mut pen_x = DVector::zeros(2 * m);
    for i in 0..m {
        pen_x[i] = (x[i] - cfg.vmax).max(0.0) - (cfg.vmin - x[i]).max(0.0);
    }
    let grad = (u - &cfg.u_ref) + sx_u.transpose() * pen_x * cfg.zeta;
    Ok(clamp_box(&(u - grad * alpha), &theta.lo, &theta.hi))
}

/// Exact-penalty merit function
/// `V(u, theta) = f(u) + zeta * (sum [g]_+ + sum box violations)`,
/// evaluated with the exact power flow.
pub fn merit_value(model: &GridModel, u: &DVector<f64>, theta: &Theta, cfg: &OfoConfig) -> Result<f64> {
    let sol = powerflow::newton_solve(model, &flat_start(model), u, &theta.d, 1e-10, 50)?;
    let g = constraint_values(model, &sol.x, cfg);
    let mut v = cost(u, &cfg.u_ref);
    for gi in g.iter() {
        v += cfg.zeta * gi.max(0.0);
    }
    for j in 0..u.len() {
        v += cfg.zeta * ((u[j] - theta.hi[j]).max(0.0) + (theta.lo[j] - u[j]).max(0.0));
    }
    Ok(v)
}
