//! Dense strictly-convex QP solver.
//!
//! Solves `min 1/2 d'Hd + c'd  s.t.  A d <= b, lo <= d <= hi` with a dual
//! active-set iteration: start at the unconstrained minimum, repeatedly
//! pick the lowest-index violated constraint, and take primal/dual steps
//! until it becomes active, dropping working-set constraints whose
//! multipliers hit zero. Each addition strictly increases the dual
//! objective, so the iteration terminates on these tiny dense problems,
//! identifies the active set exactly, and detects infeasibility when no
//! finite step can satisfy the entering constraint.
//!
//! Box bounds are handled as ordinary rows; infinite bounds are skipped.
//! Variables with `lo == hi` are pinned and eliminated up front.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Problem data. `h` must be symmetric positive definite.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    /// General inequality rows, `a * d <= b`. May have zero rows.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

/// Solver output: minimizer, multipliers, and the identified active set.
#[derive(Clone, Debug)]
pub struct QpSolution {
    pub delta: DVector<f64>,
    /// Multipliers of the general rows (>= 0, zero when inactive).
    pub ineq_duals: DVector<f64>,
    pub lo_duals: DVector<f64>,
    pub hi_duals: DVector<f64>,
    /// Active general rows, ascending.
    pub active_rows: Vec<usize>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RowId {
    General(usize),
    Lower(usize),
    Upper(usize),
}

struct Row {
    a: DVector<f64>,
    b: f64,
    id: RowId,
}

const FIXED_VAR_GAP: f64 = 1e-14;
const DUAL_DROP_TOL: f64 = 1e-12;

pub fn solve_qp(qp: &QpProblem, tol: f64) -> Result<QpSolution> {
    let n = qp.c.len();
    let m = qp.b.len();
    if qp.h.nrows() != n || qp.h.ncols() != n || qp.a.ncols() != n && m > 0 {
        return Err(Error::Dimension("qp shapes disagree".into()));
    }
    if qp.lo.len() != n || qp.hi.len() != n {
        return Err(Error::Dimension("qp box length mismatch".into()));
    }
    for j in 0..n {
        if qp.lo[j] > qp.hi[j] {
            return Err(Error::QpInfeasible);
        }
    }

    // Pin variables whose box has collapsed and reduce the problem.
    let free: Vec<usize> = (0..n)
        .filter(|&j| qp.hi[j] - qp.lo[j] > FIXED_VAR_GAP)
        .collect();
    let fixed: Vec<usize> = (0..n)
        .filter(|&j| qp.hi[j] - qp.lo[j] <= FIXED_VAR_GAP)
        .collect();
    let mut pinned = DVector::zeros(n);
    for &j in &fixed {
        pinned[j] = 0.5 * (qp.lo[j] + qp.hi[j]);
    }

    let nf = free.len();
    let h_r = DMatrix::from_fn(nf, nf, |i, j| qp.h[(free[i], free[j])]);
    let mut c_r = DVector::from_fn(nf, |i, _| qp.c[free[i]]);
    for (i, &fi) in free.iter().enumerate() {
        for &fj in &fixed {
            c_r[i] += qp.h[(fi, fj)] * pinned[fj];
        }
    }

    let mut rows = Vec::new();
    for i in 0..m {
        let a_full = qp.a.row(i).transpose();
        let a_r = DVector::from_fn(nf, |k, _| a_full[free[k]]);
        let mut b_r = qp.b[i];
        for &fj in &fixed {
            b_r -= a_full[fj] * pinned[fj];
        }
        if a_r.amax() < 1e-14 {
            // row lost all free variables; either trivially true or infeasible
            if b_r < -tol {
                return Err(Error::QpInfeasible);
            }
            continue;
        }
        rows.push(Row {
            a: a_r,
            b: b_r,
            id: RowId::General(i),
        });
    }
    for (k, &j) in free.iter().enumerate() {
        if qp.lo[j].is_finite() {
            let mut a = DVector::zeros(nf);
            a[k] = -1.0;
            rows.push(Row {
                a,
                b: -qp.lo[j],
                id: RowId::Lower(j),
            });
        }
        if qp.hi[j].is_finite() {
            let mut a = DVector::zeros(nf);
            a[k] = 1.0;
            rows.push(Row {
                a,
                b: qp.hi[j],
                id: RowId::Upper(j),
            });
        }
    }

    let (x_r, lam, iterations) = dual_active_set(&h_r, &c_r, &rows, tol)?;

    // Expand back to the full space.
    let mut delta = pinned;
    for (k, &j) in free.iter().enumerate() {
        delta[j] = x_r[k];
    }
    let mut ineq = DVector::zeros(m);
    let mut lo_d = DVector::zeros(n);
    let mut hi_d = DVector::zeros(n);
    let mut active_rows = Vec::new();
    for (row, &l) in rows.iter().zip(lam.iter()) {
        if l <= 0.0 {
            continue;
        }
        match row.id {
            RowId::General(i) => {
                ineq[i] = l;
                active_rows.push(i);
            }
            RowId::Lower(j) => lo_d[j] = l,
            RowId::Upper(j) => hi_d[j] = l,
        }
    }
    active_rows.sort_unstable();

    // Multipliers for pinned variables come from the stationarity residual.
    if !fixed.is_empty() {
        let grad = &qp.h * &delta + &qp.c + qp.a.transpose() * &ineq;
        for &j in &fixed {
            if grad[j] >= 0.0 {
                lo_d[j] = grad[j];
            } else {
                hi_d[j] = -grad[j];
            }
        }
    }

    let mut sol = QpSolution {
        delta,
        ineq_duals: ineq,
        lo_duals: lo_d,
        hi_duals: hi_d,
        active_rows,
        iterations,
        kkt_residual: 0.0,
    };
    sol.kkt_residual = kkt_residual(qp, &sol);
    if sol.kkt_residual > tol {
        return Err(Error::QpNumerical(format!(
            "kkt residual {:.3e} above tolerance {:.1e}",
            sol.kkt_residual, tol
        )));
    }
    Ok(sol)
}

/// Core iteration in the reduced space. Returns the minimizer, one
/// multiplier per row, and the iteration count.
fn dual_active_set(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    rows: &[Row],
    tol: f64,
) -> Result<(DVector<f64>, Vec<f64>, usize)> {
    let nf = c.len();
    if nf == 0 {
        // everything pinned; feasibility of the remaining rows was checked
        return Ok((DVector::zeros(0), vec![0.0; rows.len()], 0));
    }
    let h_lu = linalg::lu(h.clone())
        .map_err(|_| Error::QpNumerical("quadratic term is not positive definite".into()))?;
    let mut x = -h_lu.solve_vec(c);

    let mut work: Vec<usize> = Vec::new();
    let mut lam_work: Vec<f64> = Vec::new();
    let mut lam_all = vec![0.0; rows.len()];
    let max_iter = 50 * (rows.len() + nf + 1);
    let mut iterations = 0;

    'outer: loop {
        // lowest-index violated constraint
        let p = rows
            .iter()
            .enumerate()
            .find(|(i, r)| !work.contains(i) && r.a.dot(&x) - r.b > tol)
            .map(|(i, _)| i);
        let p = match p {
            Some(p) => p,
            None => {
                for (k, &w) in work.iter().enumerate() {
                    lam_all[w] = lam_work[k];
                }
                return Ok((x, lam_all, iterations));
            }
        };
        let mut lam_p = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::QpMaxIter {
                    max_iter,
                    residual: rows[p].a.dot(&x) - rows[p].b,
                });
            }

            // direction: H z + sum_W r_k a_k = -a_p, a_k' z = 0 for k in W
            let nw = work.len();
            let mut kkt = DMatrix::zeros(nf + nw, nf + nw);
            kkt.view_mut((0, 0), (nf, nf)).copy_from(h);
            for (k, &w) in work.iter().enumerate() {
                for i in 0..nf {
                    kkt[(i, nf + k)] = rows[w].a[i];
                    kkt[(nf + k, i)] = rows[w].a[i];
                }
            }
            let mut rhs = DVector::zeros(nf + nw);
            rhs.rows_mut(0, nf).copy_from(&(-&rows[p].a));
            let sol = linalg::lu(kkt)
                .map_err(|_| Error::QpNumerical("degenerate working set".into()))?
                .solve_vec(&rhs);
            let z = sol.rows(0, nf).into_owned();
            let r = sol.rows(nf, nw).into_owned();

            let az = rows[p].a.dot(&z);
            let violation = rows[p].a.dot(&x) - rows[p].b;
            let t_full = if az < -1e-14 {
                violation / (-az)
            } else {
                f64::INFINITY
            };
            let mut t_dual = f64::INFINITY;
            let mut blocking = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk < -DUAL_DROP_TOL {
                    let t = lam_work[k] / (-rk);
                    if t < t_dual {
                        t_dual = t;
                        blocking = Some(k);
                    }
                }
            }

            let t = t_full.min(t_dual);
            if !t.is_finite() {
                return Err(Error::QpInfeasible);
            }
            x += &z * t;
            for (k, rk) in r.iter().enumerate() {
                lam_work[k] += rk * t;
            }
            lam_p += t;

            if t_full <= t_dual {
                work.push(p);
                lam_work.push(lam_p);
                continue 'outer;
            }
            let k = blocking.expect("finite dual step implies a blocking row");
            work.remove(k);
            lam_work.remove(k);
        }
    }
}

/// Max KKT violation of a candidate solution: stationarity, primal
/// feasibility, dual nonnegativity, and complementary slackness.
pub fn kkt_residual(qp: &QpProblem, sol: &QpSolution) -> f64 {
    let d = &sol.delta;
    let stat = (&qp.h * d + &qp.c + qp.a.transpose() * &sol.ineq_duals + &sol.hi_duals
        - &sol.lo_duals)
        .amax();
    let mut worst = stat;
    let slack = &qp.b - &qp.a * d;
    for i in 0..qp.b.len() {
        worst = worst.max(-slack[i]); // primal feasibility
        worst = worst.max(-sol.ineq_duals[i]); // dual sign
        worst = worst.max((sol.ineq_duals[i] * slack[i]).abs()); // complementarity
    }
    for j in 0..d.len() {
        worst = worst.max(qp.lo[j] - d[j]);
        worst = worst.max(d[j] - qp.hi[j]);
        worst = worst.max(-sol.lo_duals[j]);
        worst = worst.max(-sol.hi_duals[j]);
        if qp.lo[j].is_finite() {
            worst = worst.max((sol.lo_duals[j] * (d[j] - qp.lo[j])).abs());
        }
        if qp.hi[j].is_finite() {
            worst = worst.max((sol.hi_duals[j] * (qp.hi[j] - d[j])).abs());
        }
    }
    worst
}
