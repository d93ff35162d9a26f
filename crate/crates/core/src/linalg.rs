//! Small dense linear-algebra helpers shared by the geometry and GP code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative diagonal jitter added to every Gram matrix before factorization.
pub const JITTER: f64 = 1e-8;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in ascending order.
pub fn sym_eig(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Applies a scalar function to the spectrum of a symmetric matrix: U f(Λ) Uᵀ.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eig(m);
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| vectors[(i, j)] * f(values[j]));
    symmetrize(&(scaled * vectors.transpose()))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eig(m).0[0]
}

/// Condition number estimate of a symmetric PSD matrix (ratio of extreme eigenvalues).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let (values, _) = sym_eig(m);
    let lo = values[0];
    let hi = values[values.len() - 1];
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Cholesky factorization that reports the condition number when it fails.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: matrix has non-finite entries")));
    }
    Cholesky::new(symmetrize(m)).ok_or_else(|| {
        Error::Numerical(format!(
            "{what}: Cholesky factorization failed (size {}, condition number ~{:.3e}, min eigenvalue {:.3e})",
            m.nrows(),
            condition_number(m),
            min_eigenvalue(m)
        ))
    })
}

/// log det of a matrix from its Cholesky factor.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Clamps the spectrum of a symmetric matrix from below.
pub fn floor_spectrum(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_apply(m, |l| l.max(floor))
}

/// Numerically stable `(e^a - e^b) / (a - b)`, equal to `e^a` when `a == b`.
pub fn exp_divided_difference(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d.abs() < 1e-9 {
        b.exp() * (1.0 + 0.5 * d)
    } else {
        b.exp() * d.exp_m1() / d
    }
}

/// Natural log of [`exp_divided_difference`] without overflow for large arguments.
pub fn ln_exp_divided_difference(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let d = hi - lo;
    if d < 1e-9 {
        lo + (1.0 + 0.5 * d).ln()
    } else if d > 30.0 {
        // e^hi (1 - e^{-d}) / d
        hi + (-(-d).exp()).ln_1p() - d.ln()
    } else {
        lo + (d.exp_m1() / d).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divided_difference_limits() {
        assert!((exp_divided_difference(1.0, 1.0) - 1f64.exp()).abs() < 1e-12);
        let direct = (2f64.exp() - 0.5f64.exp()) / 1.5;
        assert!((exp_divided_difference(2.0, 0.5) - direct).abs() < 1e-12);
        assert!((ln_exp_divided_difference(0.5, 2.0) - direct.ln()).abs() < 1e-12);
        assert!((ln_exp_divided_difference(40.0, 1.0) - ((40f64.exp() - 1f64.exp()) / 39.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn sym_apply_reconstructs() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let back = sym_apply(&m, |x| x);
        assert!((back - &m).norm() < 1e-12);
        let sq = sym_apply(&m, f64::sqrt);
        assert!((&sq * &sq - m).norm() < 1e-12);
    }

    #[test]
    fn failed_cholesky_reports_condition() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = cholesky(&m, "test").unwrap_err().to_string();
        assert!(err.contains("condition number"));
    }
}
