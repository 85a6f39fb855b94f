//! Orthogonal filter banks and the filter update.
//!
//! With codes held fixed, minimizing `sum_l ||Psi_l D - Z_l||_F^2` over banks with
//! `D D^T = I/R` is a scaled orthogonal Procrustes problem. Because
//! `tr(D^T G D) = tr(G)/R` is constant on the feasible set, the minimizer maximizes
//! `<D, B>` with `B = sum_l Psi_l^T Z_l`, giving `D = Q(B^T)^T / sqrt(R)` where `Q`
//! is the polar factor.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conv::{cross_accumulate, LiftedOperator};
use crate::error::{CaolError, Result};
use crate::linalg::{check_rank, singular_values};
use crate::train::CodeSet;

/// Entrywise tolerance on `D D^T = I/R`.
pub const TIGHT_FRAME_TOL: f64 = 1e-10;

/// R x K filter matrix whose columns are the filters, with `D D^T = I/R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct FilterBank {
    matrix: DMatrix<f64>,
}

impl FilterBank {
    /// Validates `K >= R` and the tight-frame constraint (and `D^T D = I/K` when square).
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (r, k) = matrix.shape();
        if r == 0 || k < r {
            return Err(CaolError::dims("filter bank", format!("K >= R >= 1 (R = {r})"), format!("K = {k}")));
        }
        let err = tight_frame_error(&matrix);
        if err > TIGHT_FRAME_TOL {
            return Err(CaolError::NotTightFrame(err));
        }
        if r == k {
            let dual = (matrix.tr_mul(&matrix) - DMatrix::identity(k, k) / k as f64).amax();
            if dual > TIGHT_FRAME_TOL {
                return Err(CaolError::NotTightFrame(dual));
            }
        }
        Ok(FilterBank { matrix })
    }

    /// Seeded bank `Q(G)^T / sqrt(R)` for a standard Gaussian K x R matrix `G`.
    pub fn random<G: Rng + ?Sized>(r: usize, k: usize, rng: &mut G) -> Result<Self> {
        if r == 0 || k < r {
            return Err(CaolError::dims("random filter bank", format!("K >= R >= 1 (R = {r})"), format!("K = {k}")));
        }
        loop {
            let g = DMatrix::from_fn(k, r, |_, _| rng.sample::<f64, _>(StandardNormal));
            // A Gaussian matrix is rank deficient with probability zero.
            if let Ok(q) = polar_factor(&g) {
                return FilterBank::new(q.transpose() / (r as f64).sqrt());
            }
        }
    }

    pub fn from_seed(r: usize, k: usize, seed: u64) -> Result<Self> {
        FilterBank::random(r, k, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Filter size R.
    pub fn r(&self) -> usize {
        self.matrix.nrows()
    }

    /// Filter count K.
    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }

    /// Coefficients of filter `k`.
    pub fn filter(&self, k: usize) -> Vec<f64> {
        self.matrix.column(k).iter().copied().collect()
    }
}

impl TryFrom<DMatrix<f64>> for FilterBank {
    type Error = CaolError;

    fn try_from(matrix: DMatrix<f64>) -> Result<Self> {
        FilterBank::new(matrix)
    }
}

impl From<FilterBank> for DMatrix<f64> {
    fn from(bank: FilterBank) -> Self {
        bank.matrix
    }
}

/// Largest entry of `|D D^T - I/R|`.
pub fn tight_frame_error(d: &DMatrix<f64>) -> f64 {
    let r = d.nrows();
    (d * d.transpose() - DMatrix::identity(r, r) / r as f64).amax()
}

/// Polar factor `Q = W V^T` of a K x R matrix with `K >= R` and full column rank,
/// from the thin SVD `A = W S V^T`.
pub fn polar_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (k, r) = a.shape();
    if r == 0 || k < r {
        return Err(CaolError::dims("polar_factor", format!("K >= R >= 1 (R = {r})"), format!("K = {k}")));
    }
    let svd = a.clone().svd(true, true);
    let (smax, smin) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    check_rank("polar_factor", smin, smax)?;
    let w = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    Ok(w * vt)
}

/// Procrustes filter update from the accumulated cross matrix `B = sum_l Psi_l^T Z_l`.
pub fn filter_update_from_cross(cross: &DMatrix<f64>) -> Result<FilterBank> {
    let r = cross.nrows();
    let s = singular_values(cross);
    check_rank("filter_update", *s.last().unwrap_or(&0.0), s[0])?;
    let q = polar_factor(&cross.transpose())?;
    FilterBank::new(q.transpose() / (r as f64).sqrt())
}

/// Exact minimizer of `sum_l ||Psi_l D - Z_l||_F^2` over tight-frame banks.
pub fn filter_update(lifts: &[LiftedOperator], codes: &CodeSet) -> Result<FilterBank> {
    let cross = cross_accumulate(lifts, codes.mats())?;
    filter_update_from_cross(&cross)
}
