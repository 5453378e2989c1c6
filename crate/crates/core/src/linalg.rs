//! Small dense linear-algebra helpers built on symmetric eigendecompositions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Tolerance below which a negative eigenvalue is treated as roundoff.
pub const PSD_CLAMP: f64 = 1e-12;

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Rejects non-square or non-symmetric matrices (tolerance `tol`).
pub fn ensure_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = asymmetry(m);
    if asym > tol {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Eigendecomposition of the symmetrized matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Symmetric PSD square root. Eigenvalues in `[-PSD_CLAMP, 0)` are clamped to
/// zero; anything more negative is rejected.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 1 {
        let v = m[(0, 0)];
        if v < -PSD_CLAMP {
            return Err(Error::NotPositiveSemidefinite { eigenvalue: v });
        }
        return Ok(DMatrix::from_element(1, 1, v.max(0.0).sqrt()));
    }
    let eig = sym_eigen(m);
    let mut roots = DVector::zeros(n);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -PSD_CLAMP {
            return Err(Error::NotPositiveSemidefinite { eigenvalue: lam });
        }
        roots[i] = lam.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut vals: Vec<f64> = if m.nrows() == 1 {
        vec![m[(0, 0)]]
    } else {
        sym_eigen(m).eigenvalues.iter().copied().collect()
    };
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub(crate) fn check_dim(v: &DVector<f64>, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}
