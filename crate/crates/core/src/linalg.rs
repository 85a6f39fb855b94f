//! Small dense linear-algebra helpers shared by the filter update and the bounds.

use nalgebra::DMatrix;

use crate::error::{CaolError, Result};

/// Relative threshold below which a singular value or eigenvalue counts as zero.
pub const EPS_RANK: f64 = 1e-10;

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    (eig.min(), eig.max())
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_eig_extremes(m);
    lo.abs().max(hi.abs())
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Passes when `smallest > EPS_RANK * largest` (and the matrix is not zero).
pub fn check_rank(context: &'static str, smallest: f64, largest: f64) -> Result<()> {
    if largest > 0.0 && smallest > EPS_RANK * largest {
        Ok(())
    } else {
        Err(CaolError::RankDeficient {
            context,
            min: smallest,
            max: largest,
            iteration: None,
        })
    }
}

/// Smallest eigenvalue of a symmetric PSD matrix after the rank test.
pub fn lambda_min_checked(context: &'static str, m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (lo, hi) = sym_eig_extremes(m);
    check_rank(context, lo, hi)?;
    Ok((lo, hi))
}

/// Largest entrywise deviation from symmetry.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}
