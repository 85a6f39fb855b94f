//! The CAOL objective, the hard-thresholding code update, and the alternating trainer.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{build_lifts, LiftedOperator};
use crate::error::{CaolError, Result};
use crate::procrustes::{filter_update, FilterBank};
use crate::signal::{OffsetPattern, Signal};

/// Per-sample N x K code matrices; column k of `Z_l` is the code of filter k on sample l.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSet {
    mats: Vec<DMatrix<f64>>,
}

impl CodeSet {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = mats.first().ok_or(CaolError::EmptyDataset("code set"))?;
        let shape = first.shape();
        if let Some(m) = mats.iter().find(|m| m.shape() != shape) {
            return Err(CaolError::dims("code set", format!("{shape:?}"), format!("{:?}", m.shape())));
        }
        Ok(CodeSet { mats })
    }

    pub fn mats(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn into_mats(self) -> Vec<DMatrix<f64>> {
        self.mats
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    /// Fraction of nonzero code entries.
    pub fn sparsity(&self) -> f64 {
        let total: usize = self.mats.iter().map(|m| m.len()).sum();
        self.nonzeros() as f64 / total as f64
    }

    pub fn nonzeros(&self) -> usize {
        self.mats.iter().map(|m| m.iter().filter(|v| **v != 0.0).count()).sum()
    }
}

/// Minimizer of `(v - z)^2 + alpha * [z != 0]`: keeps `v` iff `v^2 > alpha`.
#[inline]
pub fn hard_threshold(v: f64, alpha: f64) -> f64 {
    if v * v > alpha {
        v
    } else {
        0.0
    }
}

/// `sum_l sum_k ||Psi_l d_k - z_lk||^2 + alpha * nnz(z)`.
pub fn objective(d: &DMatrix<f64>, lifts: &[LiftedOperator], codes: &CodeSet, alpha: f64) -> Result<f64> {
    if lifts.len() != codes.len() {
        return Err(CaolError::dims("objective", lifts.len(), codes.len()));
    }
    let terms: Vec<f64> = lifts
        .par_iter()
        .zip(codes.mats().par_iter())
        .map(|(lift, z)| {
            let fit = lift.apply(d)?;
            if fit.shape() != z.shape() {
                return Err(CaolError::dims("objective", format!("{:?}", fit.shape()), format!("{:?}", z.shape())));
            }
            let residual = (fit - z).norm_squared();
            let nnz = z.iter().filter(|v| **v != 0.0).count();
            Ok(residual + alpha * nnz as f64)
        })
        .collect::<Result<_>>()?;
    Ok(terms.into_iter().sum())
}

/// `F(D, Z)` together with the next codes `H(Psi D)`, sharing one product per sample.
fn objective_and_codes(d: &DMatrix<f64>, lifts: &[LiftedOperator], codes: &CodeSet, alpha: f64) -> Result<(f64, CodeSet)> {
    let parts: Vec<(f64, DMatrix<f64>)> = lifts
        .par_iter()
        .zip(codes.mats().par_iter())
        .map(|(lift, z)| {
            let fit = lift.apply(d)?;
            let residual = (&fit - z).norm_squared();
            let nnz = z.iter().filter(|v| **v != 0.0).count();
            Ok((residual + alpha * nnz as f64, fit.map(|v| hard_threshold(v, alpha))))
        })
        .collect::<Result<_>>()?;
    let f = parts.iter().map(|p| p.0).sum();
    Ok((f, CodeSet::new(parts.into_iter().map(|p| p.1).collect())?))
}

/// Codes for one sample: the hard threshold of `Psi D`.
pub fn sparse_code_update(d: &FilterBank, lift: &LiftedOperator, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0) {
        return Err(CaolError::InvalidConfig(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(lift.apply(d.matrix())?.map(|v| hard_threshold(v, alpha)))
}

/// Code update over all samples.
pub fn sparse_code_update_all(d: &FilterBank, lifts: &[LiftedOperator], alpha: f64) -> Result<CodeSet> {
    let mats = lifts
        .par_iter()
        .map(|lift| sparse_code_update(d, lift, alpha))
        .collect::<Result<Vec<_>>>()?;
    CodeSet::new(mats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Iteration stride for filter snapshots.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e-3,
            max_iters: 1000,
            rel_tol: 1e-8,
            seed: 0,
            record_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(CaolError::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_iters == 0 {
            return Err(CaolError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(CaolError::InvalidConfig(format!("rel_tol must be >= 0, got {}", self.rel_tol)));
        }
        if self.record_every == 0 {
            return Err(CaolError::InvalidConfig("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterStat {
    pub iteration: usize,
    pub objective: f64,
    /// Fraction of nonzero codes.
    pub sparsity: f64,
}

/// Filters around the update of one iteration. Codes of iteration i are the hard
/// threshold of `Psi code_filters`, and `filters` is the bank fitted to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub code_filters: FilterBank,
    pub filters: FilterBank,
    pub chi_bar: Option<f64>,
}

/// Entry 0 of `stats` holds the objective of the initial bank against the first codes;
/// entry i holds `F(D_i, Z_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub alpha: f64,
    pub record_every: usize,
    pub stats: Vec<IterStat>,
    pub snapshots: Vec<Snapshot>,
    pub converged: bool,
}

impl TrainTrace {
    pub fn iterations(&self) -> usize {
        self.stats.last().map_or(0, |s| s.iteration)
    }

    pub fn snapshot(&self, iteration: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.iteration == iteration)
    }

    /// Largest increase of the objective between consecutive iterations, relative to
    /// `max(1, F)`. Nonpositive for a monotone trace.
    pub fn max_relative_increase(&self) -> f64 {
        self.stats
            .windows(2)
            .map(|w| (w[1].objective - w[0].objective) / w[0].objective.abs().max(1.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub filters: FilterBank,
    pub codes: CodeSet,
    pub trace: TrainTrace,
}

/// Lifts the signals with `pattern` and runs [`caol_train_lifts`].
pub fn caol_train(
    signals: &[Signal],
    pattern: &OffsetPattern,
    k: usize,
    config: &TrainConfig,
    init: Option<FilterBank>,
) -> Result<TrainOutput> {
    if signals.is_empty() {
        return Err(CaolError::EmptyDataset("caol_train"));
    }
    let lifts = build_lifts(signals, pattern)?;
    caol_train_lifts(&lifts, k, config, init)
}

/// Alternates the exact code update and the exact filter update until the objective
/// changes by at most `rel_tol * max(1, F)` or `max_iters` is reached.
pub fn caol_train_lifts(
    lifts: &[LiftedOperator],
    k: usize,
    config: &TrainConfig,
    init: Option<FilterBank>,
) -> Result<TrainOutput> {
    config.validate()?;
    let r = lifts.first().ok_or(CaolError::EmptyDataset("caol_train"))?.r();
    let mut d_prev = match init {
        Some(d) => {
            if d.r() != r || d.k() != k {
                return Err(CaolError::dims("initial filters", format!("{r}x{k}"), format!("{}x{}", d.r(), d.k())));
            }
            d
        }
        None => FilterBank::from_seed(r, k, config.seed)?,
    };

    let alpha = config.alpha;
    let mut codes = sparse_code_update_all(&d_prev, lifts, alpha)?;
    let mut f_prev = objective(d_prev.matrix(), lifts, &codes, alpha)?;
    let mut trace = TrainTrace {
        alpha,
        record_every: config.record_every,
        stats: vec![IterStat {
            iteration: 0,
            objective: f_prev,
            sparsity: codes.sparsity(),
        }],
        snapshots: Vec::new(),
        converged: false,
    };

    for i in 1..=config.max_iters {
        let d = filter_update(lifts, &codes).map_err(|e| match e {
            CaolError::RankDeficient { context, min, max, .. } => CaolError::RankDeficient {
                context,
                min,
                max,
                iteration: Some(i),
            },
            other => other,
        })?;
        let (f, next_codes) = objective_and_codes(d.matrix(), lifts, &codes, alpha)?;
        trace.stats.push(IterStat {
            iteration: i,
            objective: f,
            sparsity: codes.sparsity(),
        });
        let converged = (f_prev - f).abs() <= config.rel_tol * f_prev.abs().max(1.0);
        let last = converged || i == config.max_iters;
        if i == 1 || i % config.record_every == 0 || last {
            trace.snapshots.push(Snapshot {
                iteration: i,
                code_filters: d_prev.clone(),
                filters: d.clone(),
                chi_bar: None,
            });
        }
        if last {
            trace.converged = converged;
            return Ok(TrainOutput { filters: d, codes, trace });
        }
        codes = next_codes;
        d_prev = d;
        f_prev = f;
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{build_lift, convolve};
    use crate::signal::Signal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_signals(l: usize, n: usize, seed: u64) -> Vec<Signal> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..l)
            .map(|_| Signal::line((0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(hard_threshold(0.5, 1e-3), 0.5);
        assert_eq!(hard_threshold(0.01, 1e-3), 0.0);
        // Tie goes to zero.
        assert_eq!(hard_threshold(0.5, 0.25), 0.0);
        assert_eq!(hard_threshold(-1e-100, f64::MIN_POSITIVE), -1e-100);
    }

    #[test]
    fn objective_examples() {
        let x = Signal::line(vec![1.0, 0.0]).unwrap();
        let p = OffsetPattern::line(1).unwrap();
        let lift = build_lift(&x, &p).unwrap();
        let d = DMatrix::from_element(1, 1, 1.0);
        let codes = CodeSet::new(vec![DMatrix::zeros(2, 1)]).unwrap();
        assert_eq!(objective(&d, &[lift.clone()], &codes, 0.5).unwrap(), 1.0);

        let exact = CodeSet::new(vec![lift.apply(&d).unwrap()]).unwrap();
        assert_eq!(objective(&d, &[lift], &exact, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn zero_codes_give_signal_energy() {
        let signals = gaussian_signals(3, 16, 1);
        let p = OffsetPattern::line(4).unwrap();
        let lifts = build_lifts(&signals, &p).unwrap();
        let d = FilterBank::from_seed(4, 6, 3).unwrap();
        let zeros = CodeSet::new(vec![DMatrix::zeros(16, 6); 3]).unwrap();
        let f = objective(d.matrix(), &lifts, &zeros, 0.1).unwrap();
        let energy: f64 = signals.iter().map(|s| s.norm().powi(2)).sum();
        assert!((f - energy).abs() <= 1e-10 * energy);
    }

    #[test]
    fn tight_frame_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let r = 1 + trial % 5;
            let k = r + trial % 3;
            let d = FilterBank::random(r, k, &mut rng).unwrap();
            let x = Signal::line((0..17).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let p = OffsetPattern::line(r).unwrap();
            let energy: f64 = (0..k)
                .map(|j| convolve(&x, &d.filter(j), &p).unwrap().norm().powi(2))
                .sum();
            let expected = x.norm().powi(2);
            assert!((energy - expected).abs() <= 1e-9 * expected);
        }
    }

    #[test]
    fn code_update_thresholds_each_entry() {
        let x = Signal::line(vec![0.5, 0.01, -0.2]).unwrap();
        let lift = build_lift(&x, &OffsetPattern::line(1).unwrap()).unwrap();
        let d = FilterBank::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let z = sparse_code_update(&d, &lift, 1e-3).unwrap();
        assert_eq!(z.as_slice(), &[0.5, 0.0, -0.2]);
        assert!(sparse_code_update(&d, &lift, 0.0).is_err());
    }

    #[test]
    fn true_filters_are_a_fixed_point() {
        let p = OffsetPattern::line(3).unwrap();
        let signals: Vec<_> = (0..6).map(|i| Signal::impulse(8, i).unwrap()).collect();
        let d_true = FilterBank::from_seed(3, 3, 9).unwrap();
        let min_entry = d_true.matrix().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let config = TrainConfig {
            alpha: 0.5 * min_entry * min_entry,
            ..TrainConfig::default()
        };
        let out = caol_train(&signals, &p, 3, &config, Some(d_true.clone())).unwrap();
        assert!(out.trace.converged);
        assert_eq!(out.trace.iterations(), 1);
        assert!((out.filters.matrix() - d_true.matrix()).norm() <= 1e-12);
        let f = &out.trace.stats;
        assert!((f[0].objective - f[1].objective).abs() <= 1e-12 * f[0].objective.max(1.0));
    }

    #[test]
    fn trace_is_monotone_and_snapshots_recorded() {
        let signals = gaussian_signals(4, 32, 2);
        let p = OffsetPattern::line(3).unwrap();
        let config = TrainConfig {
            alpha: 0.05,
            max_iters: 120,
            rel_tol: 0.0,
            seed: 4,
            record_every: 50,
        };
        let out = caol_train(&signals, &p, 4, &config, None).unwrap();
        assert!(out.trace.max_relative_increase() <= 1e-10);
        let last = out.trace.iterations();
        let its: Vec<_> = out.trace.snapshots.iter().map(|s| s.iteration).collect();
        let mut expected: Vec<_> = (1..=last).filter(|&i| i == 1 || i % 50 == 0).collect();
        if *expected.last().unwrap() != last {
            expected.push(last);
        }
        assert_eq!(its, expected);
        assert_eq!(out.trace.stats.len(), last + 1);
        assert!(last == 120 || out.trace.converged);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            alpha: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            max_iters: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(matches!(
            caol_train(&[], &OffsetPattern::line(1).unwrap(), 1, &TrainConfig::default(), None),
            Err(CaolError::EmptyDataset(_))
        ));
    }
}
