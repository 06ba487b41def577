use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Eigenvalues of the pencil (A, B) with B symmetric positive definite,
/// computed by Cholesky whitening. A and B must be symmetric.
pub fn relative_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invariant("metric matrix is not positive definite"))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::invariant("metric Cholesky factor is singular"))?;
    let w = &l_inv * a * l_inv.transpose();
    // enforce symmetry lost to roundoff before the symmetric solver
    let w = (&w + w.transpose()) * 0.5;
    let mut eig: Vec<f64> = w.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(eig)
}

pub fn min_relative_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    Ok(relative_eigenvalues(a, b)?[0])
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_eigen_matches_scalar_case() {
        // A = 3I, B = 2I: pencil eigenvalues 1.5
        let a = DMatrix::from_diagonal_element(2, 2, 3.0);
        let b = DMatrix::from_diagonal_element(2, 2, 2.0);
        let e = relative_eigenvalues(&a, &b).unwrap();
        assert!((e[0] - 1.5).abs() < 1e-14 && (e[1] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn anisotropic_pencil() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let e = relative_eigenvalues(&a, &b).unwrap();
        assert!((e[0] + 2.0).abs() < 1e-14);
        assert!((e[1] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_metric() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(relative_eigenvalues(&a, &b).is_err());
    }
}
