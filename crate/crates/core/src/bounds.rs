//! Filter-error bounds for the Procrustes filter update.
//!
//! Writing the current codes as `Z_l = Psi_l D_true + E_l`, the error of the updated
//! filters is controlled by
//!
//! * the deterministic bound `5 ||sum_l Psi_l^T E_l||_F^2 / lambda_min^2(sum_l Psi_l^T Psi_l)`,
//! * the expected bound `5 sigma_bar^2 rho^2` for zero-mean independent mismatch, with
//!   `rho^2 = tr(G) / lambda_min^2(G)` and `sigma_bar^2 = max_l lambda_max(E{E_l E_l^T})`,
//! * a high-probability bound for i.i.d. pairs `(x_l, E_l)`, driven by
//!   `rho_bar = sqrt(tr(Lambda)/L) / lambda_min(Lambda)` and
//!   `chi_bar = ||E(Psi^T E)||_F / lambda_min(Lambda)` with `Lambda = E(Psi^T Psi)`.
//!
//! Ensemble quantities computed from data are plug-in estimates; [`EnsembleStats`]
//! keeps the sample count so reports can say so.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conv::{build_lifts, cross_accumulate, gram_accumulate, LiftedOperator};
use crate::error::{CaolError, Result};
use crate::linalg::{lambda_min_checked, singular_values, sym_eig_extremes, sym_spectral_norm};
use crate::signal::{OffsetPattern, Signal};
use crate::train::CodeSet;

/// Per-sample N x K model-mismatch matrices `E_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchSet {
    mats: Vec<DMatrix<f64>>,
}

impl MismatchSet {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = mats.first().ok_or(CaolError::EmptyDataset("mismatch set"))?;
        let shape = first.shape();
        if let Some(m) = mats.iter().find(|m| m.shape() != shape) {
            return Err(CaolError::dims("mismatch set", format!("{shape:?}"), format!("{:?}", m.shape())));
        }
        Ok(MismatchSet { mats })
    }

    pub fn mats(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn max_frobenius(&self) -> f64 {
        self.mats.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }
}

/// `E_l = Z_l - Psi_l D_ref`. `d_ref` is any R x K matrix, not necessarily a tight frame.
pub fn mismatch_from_codes(codes: &CodeSet, lifts: &[LiftedOperator], d_ref: &DMatrix<f64>) -> Result<MismatchSet> {
    if codes.len() != lifts.len() {
        return Err(CaolError::dims("mismatch_from_codes", lifts.len(), codes.len()));
    }
    let mats = codes
        .mats()
        .iter()
        .zip(lifts)
        .map(|(z, lift)| {
            let fit = lift.apply(d_ref)?;
            if fit.shape() != z.shape() {
                return Err(CaolError::dims(
                    "mismatch_from_codes",
                    format!("{:?}", fit.shape()),
                    format!("{:?}", z.shape()),
                ));
            }
            Ok(z - fit)
        })
        .collect::<Result<Vec<_>>>()?;
    MismatchSet::new(mats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBound {
    pub bound: f64,
    /// `||sum_l Psi_l^T E_l||_F^2`.
    pub numerator: f64,
    /// `lambda_min(sum_l Psi_l^T Psi_l)`.
    pub lambda_min: f64,
}

/// Deterministic bound on `||D* - D_true||_F^2`.
pub fn det_error_bound(lifts: &[LiftedOperator], mismatches: &MismatchSet) -> Result<DetBound> {
    let gram = gram_accumulate(lifts)?;
    let (lambda_min, _) = lambda_min_checked("det_error_bound", &gram)?;
    let numerator = cross_accumulate(lifts, mismatches.mats())?.norm_squared();
    Ok(DetBound {
        bound: 5.0 * numerator / (lambda_min * lambda_min),
        numerator,
        lambda_min,
    })
}

/// `tr(G) / lambda_min(G)^2` for an accumulated Gram `G`.
pub fn rho_squared_from_gram(gram: &DMatrix<f64>) -> Result<f64> {
    let (lambda_min, _) = lambda_min_checked("rho_squared", gram)?;
    Ok(gram.trace() / (lambda_min * lambda_min))
}

pub fn rho_squared(lifts: &[LiftedOperator]) -> Result<f64> {
    rho_squared_from_gram(&gram_accumulate(lifts)?)
}

/// `max_l lambda_max(E_l E_l^T)`, treating each fixed `E_l` as a point mass.
pub fn sigma_bar_sq(mismatches: &MismatchSet) -> Result<f64> {
    if mismatches.is_empty() {
        return Err(CaolError::EmptyDataset("sigma_bar_sq"));
    }
    // The nonzero spectrum of E E^T equals that of the K x K matrix E^T E.
    Ok(mismatches
        .mats()
        .iter()
        .map(|e| sym_eig_extremes(&e.tr_mul(e)).1.max(0.0))
        .fold(0.0, f64::max))
}

/// Monte Carlo `max_l lambda_max(mean_t E_{l,t} E_{l,t}^T)` over `trials` draws from
/// `draw(l, t)`.
pub fn sigma_bar_sq_sampled<F>(samples: usize, trials: usize, mut draw: F) -> Result<f64>
where
    F: FnMut(usize, usize) -> DMatrix<f64>,
{
    if samples == 0 {
        return Err(CaolError::EmptyDataset("sigma_bar_sq"));
    }
    if trials == 0 {
        return Err(CaolError::InvalidConfig("sigma_bar_sq needs at least one trial".into()));
    }
    let mut worst = 0.0f64;
    for l in 0..samples {
        let draws: Vec<DMatrix<f64>> = (0..trials).map(|t| draw(l, t)).collect();
        let (n, k) = draws[0].shape();
        let lambda = if n <= trials * k {
            let mut acc = DMatrix::zeros(n, n);
            for e in &draws {
                acc += e * e.transpose();
            }
            sym_eig_extremes(&(acc / trials as f64)).1
        } else {
            // Same spectrum via the (trials K) x (trials K) Gram of [E_1 ... E_T].
            let stacked = DMatrix::from_fn(n, trials * k, |i, j| draws[j / k][(i, j % k)]);
            sym_eig_extremes(&(stacked.tr_mul(&stacked) / trials as f64)).1
        };
        worst = worst.max(lambda);
    }
    Ok(worst)
}

/// `5 sigma_bar^2 rho^2`.
pub fn expected_bound(sigma_bar_sq: f64, rho_sq: f64) -> f64 {
    5.0 * sigma_bar_sq * rho_sq
}

/// Ensemble ingredients of the high-probability bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    /// `E(Psi^T Psi)`, R x R.
    pub lambda_bar: DMatrix<f64>,
    /// Almost-sure bound on `||x||_2`.
    pub gamma: f64,
    /// Almost-sure bound on `||E||_F`.
    pub sigma: f64,
    /// `E(Psi^T E)`, R x K.
    pub corr: DMatrix<f64>,
    /// Number of samples behind the estimates; for population values, the training L.
    pub samples: usize,
    /// False when the entries are exact population values.
    pub estimated: bool,
}

impl EnsembleStats {
    pub fn r(&self) -> usize {
        self.lambda_bar.nrows()
    }

    pub fn lambda_min(&self) -> Result<f64> {
        Ok(lambda_min_checked("ensemble lambda_bar", &self.lambda_bar)?.0)
    }

    /// Upper end of the admissible delta interval, `lambda_min / (2 R gamma^2)`.
    pub fn delta_upper(&self) -> Result<f64> {
        let lambda_min = self.lambda_min()?;
        Ok(lambda_min / (2.0 * self.r() as f64 * self.gamma * self.gamma))
    }
}

/// Plug-in estimates from lifted samples and their mismatches.
pub fn estimate_ensemble_from_lifts(lifts: &[LiftedOperator], mismatches: &MismatchSet) -> Result<EnsembleStats> {
    if lifts.is_empty() {
        return Err(CaolError::EmptyDataset("estimate_ensemble"));
    }
    let l = lifts.len() as f64;
    let lambda_bar = gram_accumulate(lifts)? / l;
    let corr = cross_accumulate(lifts, mismatches.mats())? / l;
    let gamma = lifts.iter().map(LiftedOperator::signal_norm).fold(0.0, f64::max);
    Ok(EnsembleStats {
        lambda_bar,
        gamma,
        sigma: mismatches.max_frobenius(),
        corr,
        samples: lifts.len(),
        estimated: true,
    })
}

pub fn estimate_ensemble(signals: &[Signal], mismatches: &MismatchSet, pattern: &OffsetPattern) -> Result<EnsembleStats> {
    if signals.is_empty() {
        return Err(CaolError::EmptyDataset("estimate_ensemble"));
    }
    estimate_ensemble_from_lifts(&build_lifts(signals, pattern)?, mismatches)
}

/// `(rho_bar, chi_bar)` with `L = stats.samples`.
pub fn rho_bar_chi_bar(stats: &EnsembleStats) -> Result<(f64, f64)> {
    let lambda_min = stats.lambda_min()?;
    let rho_bar = (stats.lambda_bar.trace() / stats.samples as f64).sqrt() / lambda_min;
    let chi_bar = stats.corr.norm() / lambda_min;
    Ok((rho_bar, chi_bar))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpBound {
    pub delta: f64,
    pub bound: f64,
    /// Lower bound on the probability that the error stays below `bound`; may be
    /// negative, in which case the statement is vacuous.
    pub prob: f64,
    pub vacuous: bool,
}

/// `1 - 3 R exp(-L (delta^2 / 2) / (3 + delta / 3))`, not clamped.
pub fn hp_probability(r: usize, l: usize, delta: f64) -> f64 {
    1.0 - 3.0 * r as f64 * (-(l as f64) * (delta * delta / 2.0) / (3.0 + delta / 3.0)).exp()
}

/// High-probability bound on `||D* - D_true||_F^2` for `L` i.i.d. samples.
pub fn hp_bound(stats: &EnsembleStats, delta: f64, l: usize) -> Result<HpBound> {
    let lambda_min = stats.lambda_min()?;
    let upper = stats.delta_upper()?;
    if !(delta > 0.0 && delta < upper) {
        return Err(CaolError::DeltaOutOfRange { delta, upper });
    }
    if l == 0 {
        return Err(CaolError::EmptyDataset("hp_bound"));
    }
    let r = stats.r() as f64;
    let (gamma, sigma) = (stats.gamma, stats.sigma);
    let numerator = sigma * (stats.lambda_bar.trace() / l as f64).sqrt()
        + stats.corr.norm()
        + 2.0 * sigma * gamma * r.sqrt() * delta;
    let denominator = lambda_min - 2.0 * gamma * gamma * r * delta;
    let ratio = numerator / denominator;
    let prob = hp_probability(stats.r(), l, delta);
    Ok(HpBound {
        delta,
        bound: 5.0 * ratio * ratio,
        prob,
        vacuous: prob <= 0.0,
    })
}

/// Both sides of the Weyl step `lambda_min(sum Psi^T Psi) >= L lambda_min(Lambda) - ||sum Lambda_l||_2`
/// with `Lambda_l = Psi_l^T Psi_l - Lambda`.
pub fn weyl_sides(lifts: &[LiftedOperator], lambda_bar: &DMatrix<f64>) -> Result<(f64, f64)> {
    let gram = gram_accumulate(lifts)?;
    let l = lifts.len() as f64;
    let deviation = &gram - lambda_bar * l;
    let lhs = sym_eig_extremes(&gram).0;
    let rhs = l * sym_eig_extremes(lambda_bar).0 - sym_spectral_norm(&deviation);
    Ok((lhs, rhs))
}

/// Rank diagnostics behind a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostics {
    pub gram_lambda_min: f64,
    pub gram_lambda_max: f64,
    /// Largest and R-th singular values of `sum_l Psi_l^T Z_l`, when codes were given.
    pub cross_sigma_max: Option<f64>,
    pub cross_sigma_r: Option<f64>,
    pub full_rank: bool,
}

/// Every bound quantity for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub samples: usize,
    pub det_bound: f64,
    pub numerator: f64,
    pub lambda_min: f64,
    pub rho_sq: f64,
    pub sigma_bar_sq: f64,
    pub expected_bound: f64,
    pub rho_bar: f64,
    pub chi_bar: f64,
    pub hp: Vec<HpBound>,
    pub diagnostics: RankDiagnostics,
    /// True when the ensemble quantities are plug-in estimates.
    pub ensemble_estimated: bool,
    /// `sigma_bar_sq` treats the fixed mismatches as point masses, so the
    /// zero-mean hypothesis behind the expected bound need not hold.
    pub sigma_bar_from_fixed_mismatch: bool,
}

impl BoundReport {
    /// Builds the report. `codes` only feed the rank diagnostics; `stats` defaults to the
    /// plug-in estimate from the same data.
    pub fn compute(
        lifts: &[LiftedOperator],
        mismatches: &MismatchSet,
        codes: Option<&CodeSet>,
        stats: Option<&EnsembleStats>,
        deltas: &[f64],
    ) -> Result<BoundReport> {
        let gram = gram_accumulate(lifts)?;
        let (gram_lambda_min, gram_lambda_max) = sym_eig_extremes(&gram);
        let (cross_sigma_max, cross_sigma_r) = match codes {
            Some(codes) => {
                let s = singular_values(&cross_accumulate(lifts, codes.mats())?);
                (Some(s[0]), s.last().copied())
            }
            None => (None, None),
        };
        let full_rank = gram_lambda_min > crate::linalg::EPS_RANK * gram_lambda_max
            && match (cross_sigma_max, cross_sigma_r) {
                (Some(hi), Some(lo)) => lo > crate::linalg::EPS_RANK * hi,
                _ => true,
            };
        let diagnostics = RankDiagnostics {
            gram_lambda_min,
            gram_lambda_max,
            cross_sigma_max,
            cross_sigma_r,
            full_rank,
        };

        let det = det_error_bound(lifts, mismatches)?;
        let rho_sq = rho_squared_from_gram(&gram)?;
        let sigma_bar_sq = sigma_bar_sq(mismatches)?;
        let estimated_stats;
        let stats = match stats {
            Some(s) => s,
            None => {
                estimated_stats = estimate_ensemble_from_lifts(lifts, mismatches)?;
                &estimated_stats
            }
        };
        let (rho_bar, chi_bar) = rho_bar_chi_bar(stats)?;
        let hp = deltas
            .iter()
            .map(|&delta| hp_bound(stats, delta, lifts.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundReport {
            samples: lifts.len(),
            det_bound: det.bound,
            numerator: det.numerator,
            lambda_min: det.lambda_min,
            rho_sq,
            sigma_bar_sq,
            expected_bound: expected_bound(sigma_bar_sq, rho_sq),
            rho_bar,
            chi_bar,
            hp,
            diagnostics,
            ensemble_estimated: stats.estimated,
            sigma_bar_from_fixed_mismatch: true,
        })
    }
}
