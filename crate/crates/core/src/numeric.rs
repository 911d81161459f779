//! Small numeric helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Fixed-order pairwise summation.
///
/// The reduction tree depends only on the slice length, so the result is
/// bit-reproducible regardless of how the terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().fold(0.0, |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Inverse of a symmetric positive-semidefinite matrix with a
/// pseudo-inverse fallback.
///
/// Eigenvalues below `rel_tol * trace` are treated as zero. Returns the
/// (pseudo-)inverse and whether any eigenvalue was dropped.
pub fn symmetric_pinv(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, bool) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let trace = m.trace();
    let cutoff = rel_tol * trace.abs();
    if trace > 0.0 {
        if let Some(chol) = m.clone().cholesky() {
            // Cholesky succeeding is not enough: a tiny pivot still means rank loss.
            let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
            if min_pivot > cutoff {
                return (chol.inverse(), false);
            }
        }
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut inv_vals = DVector::zeros(n);
    let mut dropped = false;
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > cutoff && ev > 0.0 {
            inv_vals[k] = 1.0 / ev;
        } else {
            dropped = true;
        }
    }
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&inv_vals) * q.transpose(), dropped)
}

/// Central finite-difference step used by the Jacobian checks.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn pinv_of_spd_is_inverse() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let (inv, dropped) = symmetric_pinv(&m, 1e-10);
        assert!(!dropped);
        assert!((&m * inv - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_deficient_drops_null_space() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let m = &v * v.transpose();
        let (inv, dropped) = symmetric_pinv(&m, 1e-10);
        assert!(dropped);
        // Moore-Penrose identity A A+ A = A
        assert!((&m * &inv * &m - &m).norm() < 1e-10);
    }
}
