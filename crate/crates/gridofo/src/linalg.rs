//! Dense LU with an explicit pivot-magnitude singularity check.
//!
//! All linear solves in the crate go through [`lu`] so that near-singular
//! systems surface as errors instead of garbage solutions. A factorization
//! is rejected when any pivot of U falls below [`PIVOT_TOL`] in magnitude.

use nalgebra::{DMatrix, DVector};

/// Pivot magnitude below which a factorization is declared singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Reported by [`lu`] when the matrix is numerically singular.
#[derive(Debug, Clone, Copy)]
pub struct Singular {
    pub pivot: f64,
}

pub struct Lu {
    inner: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Factor a square matrix, rejecting pivots below [`PIVOT_TOL`].
pub fn lu(m: DMatrix<f64>) -> Result<Lu, Singular> {
    debug_assert_eq!(m.nrows(), m.ncols());
    let inner = m.lu();
    let u = inner.u();
    let mut min_pivot = f64::INFINITY;
    for i in 0..u.nrows().min(u.ncols()) {
        min_pivot = min_pivot.min(u[(i, i)].abs());
    }
    if !min_pivot.is_finite() || min_pivot < PIVOT_TOL {
        return Err(Singular {
            pivot: if min_pivot.is_finite() { min_pivot } else { 0.0 },
        });
    }
    Ok(Lu { inner })
}

impl Lu {
    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.inner
            .solve(rhs)
            .expect("pivot check at factorization guarantees solvability")
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner
            .solve(rhs)
            .expect("pivot check at factorization guarantees solvability")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(lu(m).is_err());
    }

    #[test]
    fn solves_well_conditioned() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_row_slice(&[3.0, 5.0]);
        let f = lu(m.clone()).unwrap();
        let x = f.solve_vec(&b);
        assert!((m * x - b).amax() < 1e-12);
    }
}
