//! Power-flow residual, analytic polar Jacobians, the offline Newton
//! solver, the single/N-step online solver with sensitivity conditioning,
//! and the input/disturbance sensitivities of the high-voltage solution.
//!
//! Sign convention, used by every oracle in the test suite: the residual is
//! injected minus specified power, stacked `h = [P block; Q block]` over
//! the non-slack buses in increasing bus order, matching the state layout
//! `x = [vm block; va block]`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, PIVOT_TOL};
use crate::network::{assemble_injections, GridModel, InputChannel, PowerKind};

/// Guard on `||h||_2` inside the online solver; exceeding it aborts with a
/// diagnostic instead of silently leaving the trust region of the
/// linearization.
pub const DEFAULT_RESIDUAL_RADIUS: f64 = 1.0;

/// Default convergence tolerance on `||h||_inf` for [`newton_solve`].
pub const DEFAULT_NEWTON_TOL: f64 = 1e-10;

/// Default iteration cap for [`newton_solve`].
pub const DEFAULT_NEWTON_MAX_ITER: usize = 30;

/// Voltage magnitudes and angles at the non-slack buses,
/// stacked as `x = [vm; va]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    x: DVector<f64>,
}

impl GridState {
    pub fn from_parts(vm: DVector<f64>, va: DVector<f64>) -> Result<Self> {
        if vm.len() != va.len() {
            return Err(Error::Dimension("vm and va lengths differ".into()));
        }
        if vm.iter().any(|&v| v <= 0.0) {
            return Err(Error::Invariant {
                name: "high-voltage region",
                detail: "voltage magnitude must be positive".into(),
            });
        }
        let mut x = DVector::zeros(2 * vm.len());
        x.rows_mut(0, vm.len()).copy_from(&vm);
        x.rows_mut(vm.len(), va.len()).copy_from(&va);
        Ok(GridState { x })
    }

    /// Flat profile: all magnitudes 1 p.u., all angles 0.
    pub fn flat(model: &GridModel) -> Self {
        let m = model.n_buses() - 1;
        let mut x = DVector::zeros(2 * m);
        for i in 0..m {
            x[i] = 1.0;
        }
        GridState { x }
    }

    pub fn from_stacked(x: DVector<f64>) -> Self {
        debug_assert!(x.len() % 2 == 0);
        GridState { x }
    }

    pub fn stacked(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn into_stacked(self) -> DVector<f64> {
        self.x
    }

    pub fn vm(&self) -> DVector<f64> {
        self.x.rows(0, self.x.len() / 2).into_owned()
    }

    pub fn va(&self) -> DVector<f64> {
        self.x.rows(self.x.len() / 2, self.x.len() / 2).into_owned()
    }
}

/// Flat-start state vector for `model`: vm = 1, va = 0.
pub fn flat_start(model: &GridModel) -> DVector<f64> {
    GridState::flat(model).into_stacked()
}

/// Partial derivatives of the residual.
#[derive(Clone, Debug)]
pub struct PfJacobians {
    /// d h / d x, `n_x x n_x`.
    pub hx: DMatrix<f64>,
    /// d h / d u, `n_x x n_u`.
    pub hu: DMatrix<f64>,
    /// d h / d d, `n_x x n_d`.
    pub hd: DMatrix<f64>,
}

/// Complex bus voltages from the state vector and the slack set-point.
fn bus_voltages(model: &GridModel, x: &DVector<f64>, u: &DVector<f64>) -> DVector<Complex64> {
    let m = model.n_buses() - 1;
    let mut v = DVector::<Complex64>::zeros(model.n_buses());
    v[model.slack()] = Complex64::new(u[model.slack_input()], 0.0);
    for (p, &bus) in model.non_slack().iter().enumerate() {
        v[bus] = Complex64::from_polar(x[p], x[m + p]);
    }
    v
}

fn check_shapes(model: &GridModel, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
    if x.len() != model.n_states() {
        return Err(Error::Dimension(format!(
            "state has {} entries, model expects {}",
            x.len(),
            model.n_states()
        )));
    }
    if u.len() != model.n_inputs() || d.len() != model.n_disturbances() {
        return Err(Error::Dimension("input/disturbance length mismatch".into()));
    }
    Ok(())
}

/// Power-flow residual `h(x, u, d)`, injected minus specified, stacked
/// `[P; Q]` over the non-slack buses.
pub fn residual(
    model: &GridModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_shapes(model, x, u, d)?;
    let v = bus_voltages(model, x, u);
    let i_bus = model.admittance() * &v;
    let s_spec = assemble_injections(model, u, d)?;
    let m = model.n_buses() - 1;
    let mut h = DVector::zeros(2 * m);
    for (p, &bus) in model.non_slack().iter().enumerate() {
        let s_inj = v[bus] * i_bus[bus].conj();
        let delta = s_inj - s_spec[bus];
        h[p] = delta.re;
        h[m + p] = delta.im;
    }
    Ok(h)
}

/// Analytic polar-form Jacobians of the residual at `(x, u, d)`.
///
/// `hu` columns for P/Q set-point channels are `-1` selection entries; the
/// slack-magnitude column differentiates the injected power through the
/// slack voltage. `hd` columns are `-1` selection entries.
pub fn jacobians(
    model: &GridModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<PfJacobians> {
    check_shapes(model, x, u, d)?;
    let n = model.n_buses();
    let m = n - 1;
    let y = model.admittance();
    let v = bus_voltages(model, x, u);
    let i_bus = y * &v;

    // dS/dVm and dS/dVa of the injected power S = diag(V) conj(Y V):
    //   dS/dVm = diag(Vn) conj(diag(I)) + diag(V) conj(Y diag(Vn))
    //   dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
    // with Vn the unit phasors V / |V|.
    let vn = DVector::<Complex64>::from_fn(n, |i, _| {
        let mag = v[i].norm();
        if mag > 0.0 {
            v[i] / mag
        } else {
            Complex64::new(1.0, 0.0)
        }
    });
    let diag_v = DMatrix::from_diagonal(&v);
    let diag_vn = DMatrix::from_diagonal(&vn);
    let diag_i = DMatrix::from_diagonal(&i_bus);
    let ds_dvm = &diag_vn * diag_i.map(|z| z.conj()) + &diag_v * (y * &diag_vn).map(|z| z.conj());
    let ds_dva = (&diag_v * (&diag_i - y * &diag_v).map(|z| z.conj()))
        .map(|z| z * Complex64::new(0.0, 1.0));

    let mut hx = DMatrix::zeros(2 * m, 2 * m);
    for (pi, &bi) in model.non_slack().iter().enumerate() {
        for (pk, &bk) in model.non_slack().iter().enumerate() {
            hx[(pi, pk)] = ds_dvm[(bi, bk)].re;
            hx[(pi, m + pk)] = ds_dva[(bi, bk)].re;
            hx[(m + pi, pk)] = ds_dvm[(bi, bk)].im;
            hx[(m + pi, m + pk)] = ds_dva[(bi, bk)].im;
        }
    }

    let mut hu = DMatrix::zeros(2 * m, model.n_inputs());
    for (j, ch) in model.inputs().iter().enumerate() {
        match ch {
            InputChannel::Power { bus, kind } => {
                let p = model.state_position(*bus).expect("validated non-slack");
                let row = match kind {
                    PowerKind::Active => p,
                    PowerKind::Reactive => m + p,
                };
                hu[(row, j)] = -1.0;
            }
            InputChannel::SlackVoltage => {
                let s = model.slack();
                for (pi, &bi) in model.non_slack().iter().enumerate() {
                    hu[(pi, j)] = ds_dvm[(bi, s)].re;
                    hu[(m + pi, j)] = ds_dvm[(bi, s)].im;
                }
            }
        }
    }

    let mut hd = DMatrix::zeros(2 * m, model.n_disturbances());
    for (j, ch) in model.disturbances().iter().enumerate() {
        let p = model.state_position(ch.bus).expect("validated non-slack");
        let row = match ch.kind {
            PowerKind::Active => p,
            PowerKind::Reactive => m + p,
        };
        hd[(row, j)] = -1.0;
    }

    Ok(PfJacobians { hx, hu, hd })
}

/// Outcome of [`newton_solve`]: solution, iteration count, and the
/// `||h||_inf` history (entry 0 is the initial residual).
#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

/// Full Newton iteration `x <- x - Hx^{-1} h` until `||h||_inf <= tol`.
pub fn newton_solve(
    model: &GridModel,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<NewtonOutcome> {
    let mut x = x0.clone();
    let mut h = residual(model, &x, u, d)?;
    let mut hn = h.amax();
    let mut residuals = vec![hn];
    let mut iterations = 0;
    while hn > tol {
        if iterations >= max_iter {
            return Err(Error::NewtonMaxIter {
                max_iter,
                residual: hn,
            });
        }
        let jac = jacobians(model, &x, u, d)?;
        let lu = linalg::lu(jac.hx).map_err(|s| Error::JacobianSingular {
            pivot: s.pivot,
            tol: PIVOT_TOL,
        })?;
        x -= lu.solve_vec(&h);
        iterations += 1;
        h = residual(model, &x, u, d)?;
        hn = h.amax();
        residuals.push(hn);
        if !hn.is_finite() {
            return Err(Error::NewtonMaxIter {
                max_iter,
                residual: hn,
            });
        }
    }
    Ok(NewtonOutcome {
        x,
        iterations,
        residuals,
    })
}

/// One online power-flow update with sensitivity conditioning.
///
/// Runs `n_steps` inner iterations of step size `1/n_steps`, with the
/// intermediate operating points `u_k = u_old + (k/n_steps)(u_new - u_old)`
/// (and likewise for `d`):
///
/// ```text
/// z <- z - (1/N) Hx^{-1} (h + Hu (u_new - u_old) + Hd (d_new - d_old))
/// ```
///
/// With `n_steps = 1` this is a plain Newton step plus the feedforward
/// terms that track the moving solution. `radius` guards `||h||_2` at
/// every inner step.
#[allow(clippy::too_many_arguments)]
pub fn online_pf_step(
    model: &GridModel,
    z: &DVector<f64>,
    u_new: &DVector<f64>,
    u_old: &DVector<f64>,
    d_new: &DVector<f64>,
    d_old: &DVector<f64>,
    n_steps: usize,
    radius: f64,
) -> Result<DVector<f64>> {
    if n_steps < 1 {
        return Err(Error::Config("online solver needs n_steps >= 1".into()));
    }
    let du = u_new - u_old;
    let dd = d_new - d_old;
    let nf = n_steps as f64;
    let mut z = z.clone();
    for k in 0..n_steps {
        let frac = k as f64 / nf;
        let uk = u_old + &du * frac;
        let dk = d_old + &dd * frac;
        let h = residual(model, &z, &uk, &dk)?;
        let norm = h.norm();
        if norm > radius {
            return Err(Error::ResidualRadius { norm, radius });
        }
        let jac = jacobians(model, &z, &uk, &dk)?;
        let lu = linalg::lu(jac.hx).map_err(|s| Error::JacobianSingular {
            pivot: s.pivot,
            tol: PIVOT_TOL,
        })?;
        let rhs = h + &jac.hu * &du + &jac.hd * &dd;
        z -= lu.solve_vec(&rhs) / nf;
    }
    Ok(z)
}

/// Sensitivities of the high-voltage solution map:
/// `(-Hx^{-1} Hu, -Hx^{-1} Hd)`, solved column-wise by LU.
pub fn sensitivities(
    model: &GridModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let jac = jacobians(model, x, u, d)?;
    let lu = linalg::lu(jac.hx).map_err(|s| Error::JacobianSingular {
        pivot: s.pivot,
        tol: PIVOT_TOL,
    })?;
    let sx_u = -lu.solve_mat(&jac.hu);
    let sx_d = -lu.solve_mat(&jac.hd);
    Ok((sx_u, sx_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ChannelDesc, ChannelKindDesc, FixtureBounds, GridFixture, Line};
    use approx::assert_relative_eq;

    fn two_bus() -> GridModel {
        let fx = GridFixture {
            buses: 2,
            slack: 0,
            lines: vec![Line {
                from: 0,
                to: 1,
                r: 0.01,
                x: 0.1,
                b: 0.0,
            }],
            inputs: vec![ChannelDesc {
                bus: None,
                kind: ChannelKindDesc::Vslack,
            }],
            disturbances: vec![
                ChannelDesc {
                    bus: Some(1),
                    kind: ChannelKindDesc::P,
                },
                ChannelDesc {
                    bus: Some(1),
                    kind: ChannelKindDesc::Q,
                },
            ],
            bounds: FixtureBounds {
                u_lo: vec![0.94],
                u_hi: vec![1.10],
                d_lo: vec![-2.0, -2.0],
                d_hi: vec![2.0, 2.0],
            },
            base_mva: None,
            base_kv: None,
        };
        GridModel::from_fixture(&fx).unwrap()
    }

    /// Gauss-Seidel fixed-point iteration on the implicit voltage equation
    /// U_i = (conj(S_i / U_i) - sum_{k != i} Y_ik U_k) / Y_ii, independent
    /// of the Newton path.
    fn gauss_seidel(
        model: &GridModel,
        u: &DVector<f64>,
        d: &DVector<f64>,
        tol: f64,
    ) -> DVector<f64> {
        let n = model.n_buses();
        let y = model.admittance();
        let s = assemble_injections(model, u, d).unwrap();
        let mut v = vec![Complex64::new(1.0, 0.0); n];
        v[model.slack()] = Complex64::new(u[model.slack_input()], 0.0);
        for _ in 0..200_000 {
            let mut delta: f64 = 0.0;
            for &bus in model.non_slack() {
                let mut acc = (s[bus] / v[bus]).conj();
                for k in 0..n {
                    if k != bus {
                        acc -= y[(bus, k)] * v[k];
                    }
                }
                let next = acc / y[(bus, bus)];
                delta = delta.max((next - v[bus]).norm());
                v[bus] = next;
            }
            if delta < tol {
                break;
            }
        }
        let m = n - 1;
        let mut x = DVector::zeros(2 * m);
        for (p, &bus) in model.non_slack().iter().enumerate() {
            x[p] = v[bus].norm();
            x[m + p] = v[bus].arg();
        }
        x
    }

    #[test]
    fn flat_no_load_residual_is_zero() {
        let model = two_bus();
        let x = flat_start(&model);
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::zeros(2);
        let h = residual(&model, &x, &u, &d).unwrap();
        assert_eq!(h.amax(), 0.0);
    }

    #[test]
    fn flat_start_residual_is_negative_specified_injection() {
        let model = two_bus();
        let x = flat_start(&model);
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::from_row_slice(&[-0.5, -0.2]);
        let h = residual(&model, &x, &u, &d).unwrap();
        // injected is zero on a flat profile, so h = -specified
        assert_relative_eq!(h[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(h[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn newton_matches_gauss_seidel_oracle() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::from_row_slice(&[-0.5, -0.2]);
        let sol = newton_solve(&model, &flat_start(&model), &u, &d, 1e-10, 30).unwrap();
        assert!(sol.iterations <= 5, "took {} iterations", sol.iterations);
        let h = residual(&model, &sol.x, &u, &d).unwrap();
        assert!(h.amax() < 1e-10);

        let oracle = gauss_seidel(&model, &u, &d, 1e-12);
        assert!((&sol.x - &oracle).amax() < 1e-9);

        // frozen values computed with the fixed-point oracle above
        assert_relative_eq!(sol.x[0], 0.9730913474354074, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], -0.0493473577340693, epsilon = 1e-9);
    }

    #[test]
    fn zero_load_converges_immediately() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::zeros(2);
        let sol = newton_solve(&model, &flat_start(&model), &u, &d, 1e-10, 30).unwrap();
        assert!(sol.iterations <= 1);
        assert_eq!(sol.x, flat_start(&model));
    }

    #[test]
    fn collapse_load_fails_loudly() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::from_row_slice(&[-25.0, -10.0]);
        let err = newton_solve(&model, &flat_start(&model), &u, &d, 1e-10, 30).unwrap_err();
        assert!(matches!(
            err,
            Error::JacobianSingular { .. } | Error::NewtonMaxIter { .. }
        ));
    }

    /// Central finite differences of the residual.
    fn fd_jacobians(
        model: &GridModel,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
        eps: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let nx = x.len();
        let fd = |col: usize, kind: u8| -> DVector<f64> {
            let (mut xp, mut up, mut dp) = (x.clone(), u.clone(), d.clone());
            let (mut xm, mut um, mut dm) = (x.clone(), u.clone(), d.clone());
            match kind {
                0 => {
                    xp[col] += eps;
                    xm[col] -= eps;
                }
                1 => {
                    up[col] += eps;
                    um[col] -= eps;
                }
                _ => {
                    dp[col] += eps;
                    dm[col] -= eps;
                }
            }
            (residual(model, &xp, &up, &dp).unwrap() - residual(model, &xm, &um, &dm).unwrap())
                / (2.0 * eps)
        };
        let hx = DMatrix::from_columns(&(0..nx).map(|j| fd(j, 0)).collect::<Vec<_>>());
        let hu = DMatrix::from_columns(&(0..u.len()).map(|j| fd(j, 1)).collect::<Vec<_>>());
        let hd = DMatrix::from_columns(&(0..d.len()).map(|j| fd(j, 2)).collect::<Vec<_>>());
        (hx, hu, hd)
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let model = two_bus();
        let x = DVector::from_row_slice(&[0.97, -0.03]);
        let u = DVector::from_row_slice(&[1.02]);
        let d = DVector::from_row_slice(&[-0.4, -0.15]);
        let jac = jacobians(&model, &x, &u, &d).unwrap();
        let (hx, hu, hd) = fd_jacobians(&model, &x, &u, &d, 1e-6);
        assert!(rel_err(&jac.hx, &hx) < 1e-5);
        assert!(rel_err(&jac.hu, &hu) < 1e-5);
        assert!(rel_err(&jac.hd, &hd) < 1e-5);
    }

    #[test]
    fn p_channel_column_is_unit_selection() {
        let model = two_bus();
        let x = flat_start(&model);
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::zeros(2);
        let jac = jacobians(&model, &x, &u, &d).unwrap();
        // disturbance 0 is P at bus 1
        let col = jac.hd.column(0);
        let nonzero: Vec<_> = col.iter().filter(|v| **v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(*nonzero[0], -1.0);
    }

    /// Textbook polar Jacobian entries assembled bus by bus.
    fn naive_flat_hx(model: &GridModel) -> DMatrix<f64> {
        let n = model.n_buses();
        let m = n - 1;
        let y = model.admittance();
        // flat state: V_i = 1, theta_i = 0 -> P_i = sum G_ik, Q_i = -sum B_ik
        let g = |i: usize, k: usize| y[(i, k)].re;
        let b = |i: usize, k: usize| y[(i, k)].im;
        let p_i = |i: usize| (0..n).map(|k| g(i, k)).sum::<f64>();
        let q_i = |i: usize| -(0..n).map(|k| b(i, k)).sum::<f64>();
        let mut hx = DMatrix::zeros(2 * m, 2 * m);
        for (pi, &i) in model.non_slack().iter().enumerate() {
            for (pk, &k) in model.non_slack().iter().enumerate() {
                if i == k {
                    hx[(pi, pk)] = p_i(i) + g(i, i); // dP_i/dV_i
                    hx[(pi, m + pk)] = -q_i(i) - b(i, i); // dP_i/dtheta_i
                    hx[(m + pi, pk)] = q_i(i) - b(i, i); // dQ_i/dV_i
                    hx[(m + pi, m + pk)] = p_i(i) - g(i, i); // dQ_i/dtheta_i
                } else {
                    hx[(pi, pk)] = g(i, k);
                    hx[(pi, m + pk)] = -b(i, k);
                    hx[(m + pi, pk)] = -b(i, k);
                    hx[(m + pi, m + pk)] = -g(i, k);
                }
            }
        }
        hx
    }

    #[test]
    fn flat_state_matches_textbook_jacobian() {
        let model = two_bus();
        let x = flat_start(&model);
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::zeros(2);
        let jac = jacobians(&model, &x, &u, &d).unwrap();
        let oracle = naive_flat_hx(&model);
        assert!(rel_err(&jac.hx, &oracle) < 1e-13);
    }

    #[test]
    fn online_step_fixed_point() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::from_row_slice(&[-0.5, -0.2]);
        let sol = newton_solve(&model, &flat_start(&model), &u, &d, 1e-14, 50).unwrap();
        let z = online_pf_step(&model, &sol.x, &u, &u, &d, &d, 1, DEFAULT_RESIDUAL_RADIUS).unwrap();
        assert!((&z - &sol.x).amax() < 1e-13);
    }

    #[test]
    fn online_step_reduces_to_newton_without_variation() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::from_row_slice(&[-0.5, -0.2]);
        let x = flat_start(&model);
        let z = online_pf_step(&model, &x, &u, &u, &d, &d, 1, DEFAULT_RESIDUAL_RADIUS).unwrap();
        let jac = jacobians(&model, &x, &u, &d).unwrap();
        let h = residual(&model, &x, &u, &d).unwrap();
        let newton = &x - linalg::lu(jac.hx).unwrap().solve_vec(&h);
        assert!((&z - &newton).amax() < 1e-15);
    }

    #[test]
    fn online_step_rejects_zero_steps() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::zeros(2);
        let x = flat_start(&model);
        assert!(online_pf_step(&model, &x, &u, &u, &d, &d, 0, 1.0).is_err());
    }

    #[test]
    fn online_step_radius_guard() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::from_row_slice(&[-3.0, -1.5]);
        let x = flat_start(&model);
        let err = online_pf_step(&model, &x, &u, &u, &d, &d, 1, 1.0).unwrap_err();
        assert!(matches!(err, Error::ResidualRadius { .. }));
    }

    #[test]
    fn online_ramp_tracks_solution() {
        // Ramp d by 0.01/step for 100 steps starting from the exact
        // solution. With N = 1 the per-step bound collapses to
        // ||h_{t+1}|| <= L_hat, so the residual measured on the first half
        // of the ramp must cap the second half, and z must stay within
        // 1e-3 of the Newton ground truth at every step.
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d0 = DVector::from_row_slice(&[-0.1, -0.05]);
        let start = newton_solve(&model, &flat_start(&model), &u, &d0, 1e-13, 50).unwrap();
        let mut z = start.x.clone();
        let mut norms = Vec::new();
        let mut gap_sup: f64 = 0.0;
        let mut d_prev = d0.clone();
        for t in 0..100 {
            let d_next = &d0 + DVector::from_row_slice(&[-0.01, -0.004]) * ((t + 1) as f64);
            z = online_pf_step(&model, &z, &u, &u, &d_next, &d_prev, 1, 1.0).unwrap();
            let h = residual(&model, &z, &u, &d_next).unwrap();
            norms.push(h.norm());
            let truth = newton_solve(&model, &z, &u, &d_next, 1e-12, 50).unwrap();
            gap_sup = gap_sup.max((&z - &truth.x).amax());
            d_prev = d_next;
        }
        let l_hat = norms[..50].iter().cloned().fold(0.0_f64, f64::max);
        let tail = norms[50..].iter().cloned().fold(0.0_f64, f64::max);
        assert!(
            tail <= l_hat * 1.25 + 1e-15,
            "residual grew along the ramp: head {l_hat}, tail {tail}"
        );
        assert!(gap_sup < 1e-3, "sup gap to Newton truth {gap_sup}");
    }

    #[test]
    fn refining_n_does_not_increase_residual() {
        let model = two_bus();
        let u0 = DVector::from_row_slice(&[1.0]);
        let u1 = DVector::from_row_slice(&[1.02]);
        let d0 = DVector::from_row_slice(&[-0.3, -0.1]);
        let d1 = DVector::from_row_slice(&[-0.45, -0.18]);
        let start = newton_solve(&model, &flat_start(&model), &u0, &d0, 1e-13, 50).unwrap();
        let mut prev = f64::INFINITY;
        for n in [1usize, 2, 4, 8] {
            let z = online_pf_step(&model, &start.x, &u1, &u0, &d1, &d0, n, 1.0).unwrap();
            let hn = residual(&model, &z, &u1, &d1).unwrap().norm();
            assert!(
                hn <= prev * 1.01 + 1e-12,
                "residual grew from {prev} to {hn} at N = {n}"
            );
            prev = hn;
        }
    }

    #[test]
    fn slack_sensitivity_at_no_load_is_uniform() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.0]);
        let d = DVector::zeros(2);
        let x = flat_start(&model);
        let (sx_u, _) = sensitivities(&model, &x, &u, &d).unwrap();
        let m = model.n_buses() - 1;
        let col = sx_u.column(model.slack_input());
        for p in 0..m {
            assert_relative_eq!(col[p], 1.0, epsilon = 1e-12); // vm block
            assert_relative_eq!(col[m + p], 0.0, epsilon = 1e-12); // va block
        }
    }

    #[test]
    fn sensitivities_match_solution_differences() {
        let model = two_bus();
        let u = DVector::from_row_slice(&[1.01]);
        let d = DVector::from_row_slice(&[-0.35, -0.12]);
        let sol = newton_solve(&model, &flat_start(&model), &u, &d, 1e-12, 50).unwrap();
        let (sx_u, sx_d) = sensitivities(&model, &sol.x, &u, &d).unwrap();
        let eps = 1e-6;
        for j in 0..model.n_inputs() {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += eps;
            um[j] -= eps;
            let xp = newton_solve(&model, &sol.x, &up, &d, 1e-12, 50).unwrap().x;
            let xm = newton_solve(&model, &sol.x, &um, &d, 1e-12, 50).unwrap().x;
            let fd = (xp - xm) / (2.0 * eps);
            let err = (&fd - sx_u.column(j)).norm() / fd.norm().max(1e-12);
            assert!(err < 1e-4, "input column {j} error {err}");
        }
        for j in 0..model.n_disturbances() {
            let mut dp = d.clone();
            let mut dm = d.clone();
            dp[j] += eps;
            dm[j] -= eps;
            let xp = newton_solve(&model, &sol.x, &u, &dp, 1e-12, 50).unwrap().x;
            let xm = newton_solve(&model, &sol.x, &u, &dm, 1e-12, 50).unwrap().x;
            let fd = (xp - xm) / (2.0 * eps);
            let err = (&fd - sx_d.column(j)).norm() / fd.norm().max(1e-12);
            assert!(err < 1e-4, "disturbance column {j} error {err}");
        }
    }

    #[test]
    fn disturbance_and_input_power_columns_agree() {
        // Same (bus, P) channel routed once through u and once through d:
        // the sensitivity columns must be identical.
        let base = GridFixture {
            buses: 3,
            slack: 0,
            lines: vec![
                Line {
                    from: 0,
                    to: 1,
                    r: 0.01,
                    x: 0.05,
                    b: 0.0,
                },
                Line {
                    from: 1,
                    to: 2,
                    r: 0.02,
                    x: 0.06,
                    b: 0.0,
                },
            ],
            inputs: vec![ChannelDesc {
                bus: None,
                kind: ChannelKindDesc::Vslack,
            }],
            disturbances: vec![
                ChannelDesc {
                    bus: Some(1),
                    kind: ChannelKindDesc::Q,
                },
                ChannelDesc {
                    bus: Some(2),
                    kind: ChannelKindDesc::P,
                },
                ChannelDesc {
                    bus: Some(2),
                    kind: ChannelKindDesc::Q,
                },
            ],
            bounds: FixtureBounds {
                u_lo: vec![0.94],
                u_hi: vec![1.10],
                d_lo: vec![-2.0; 3],
                d_hi: vec![2.0; 3],
            },
            base_mva: None,
            base_kv: None,
        };
        // variant A: P at bus 1 is an input
        let mut fa = base.clone();
        fa.inputs.push(ChannelDesc {
            bus: Some(1),
            kind: ChannelKindDesc::P,
        });
        fa.bounds.u_lo.push(-2.0);
        fa.bounds.u_hi.push(2.0);
        // variant B: P at bus 1 is a disturbance
        let mut fb = base.clone();
        fb.disturbances.push(ChannelDesc {
            bus: Some(1),
            kind: ChannelKindDesc::P,
        });
        fb.bounds.d_lo.push(-2.0);
        fb.bounds.d_hi.push(2.0);

        let ma = GridModel::from_fixture(&fa).unwrap();
        let mb = GridModel::from_fixture(&fb).unwrap();
        let x = DVector::from_row_slice(&[0.98, 0.97, -0.02, -0.03]);
        let ua = DVector::from_row_slice(&[1.0, 0.1]);
        let da = DVector::from_row_slice(&[-0.1, -0.2, -0.05]);
        let ub = DVector::from_row_slice(&[1.0]);
        let db = DVector::from_row_slice(&[-0.1, -0.2, -0.05, 0.1]);
        let (sxu_a, _) = sensitivities(&ma, &x, &ua, &da).unwrap();
        let (_, sxd_b) = sensitivities(&mb, &x, &ub, &db).unwrap();
        let col_a = sxu_a.column(1);
        let col_b = sxd_b.column(3);
        assert!((col_a - col_b).amax() < 1e-13);
    }
}
