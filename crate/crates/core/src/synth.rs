//! Synthetic instances with known ground-truth filters, and the Monte Carlo runs that
//! check the error bounds against them.
//!
//! Every trial draws from its own ChaCha stream derived from `(seed, trial)`, so
//! serial and parallel runs produce identical reports.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    det_error_bound, expected_bound, hp_bound, mismatch_from_codes, rho_squared_from_gram, EnsembleStats, HpBound,
    MismatchSet,
};
use crate::conv::{build_lift, build_lifts, cross_accumulate, gram_accumulate, LiftedOperator};
use crate::error::{CaolError, Result};
use crate::linalg::{lambda_min_checked, singular_values, EPS_RANK};
use crate::procrustes::{filter_update, FilterBank};
use crate::signal::{Geometry, OffsetPattern, Signal};
use crate::train::{sparse_code_update_all, CodeSet, TrainTrace};

/// Attempts allowed to draw an instance that satisfies the rank hypotheses.
pub const MAX_RANK_ATTEMPTS: usize = 100;
/// Tolerance on `error <= bound`.
pub const VIOLATION_TOL: f64 = 1e-9;
/// Draws used when a population quantity has no closed form.
pub const HELD_OUT_DRAWS: usize = 100_000;
/// Default iteration stride for chi tracking.
pub const DEFAULT_CHI_STRIDE: usize = 50;
/// Default number of random subsets per sample count in a rho scan.
pub const DEFAULT_SCAN_REPLICATES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalModel {
    /// i.i.d. standard normal samples.
    Gaussian,
    /// Unit impulse at a uniform random position.
    Impulse,
    /// Uniform draws (with replacement) from a loaded signal pool.
    Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MismatchModel {
    Zero,
    /// i.i.d. `N(0, std^2)` entries.
    IidGaussian { std: f64 },
    /// Uniform direction with `||E||_F = radius * u^(1/(N K))`, `u ~ U(0, 1)`.
    BoundedBall { radius: f64 },
    /// `E = c Psi P + bounded-ball(noise_radius)` for a fixed unit-norm R x K matrix `P`.
    Correlated { c: f64, noise_radius: f64 },
}

impl MismatchModel {
    pub fn label(&self) -> String {
        match *self {
            MismatchModel::Zero => "zero".into(),
            MismatchModel::IidGaussian { std } => format!("iid-gaussian(std={std})"),
            MismatchModel::BoundedBall { radius } => format!("bounded-ball(radius={radius})"),
            MismatchModel::Correlated { c, noise_radius } => format!("correlated(c={c}, noise_radius={noise_radius})"),
        }
    }

    fn is_zero_mean(&self) -> bool {
        !matches!(self, MismatchModel::Correlated { .. })
    }

    fn params_valid(&self) -> bool {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        match *self {
            MismatchModel::Zero => true,
            MismatchModel::IidGaussian { std } => ok(std),
            MismatchModel::BoundedBall { radius } => ok(radius),
            MismatchModel::Correlated { c, noise_radius } => ok(c) && ok(noise_radius),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Signal length; ignored for the dataset model, which takes it from the pool.
    pub n: usize,
    pub r: usize,
    pub k: usize,
    pub l: usize,
    pub signal_model: SignalModel,
    pub mismatch_model: MismatchModel,
    pub seed: u64,
    pub trials: usize,
    #[serde(skip)]
    pub pool: Option<Arc<Vec<Signal>>>,
}

impl SynthSpec {
    pub fn new(n: usize, r: usize, k: usize, l: usize) -> Self {
        SynthSpec {
            n,
            r,
            k,
            l,
            signal_model: SignalModel::Gaussian,
            mismatch_model: MismatchModel::Zero,
            seed: 0,
            trials: 1,
            pool: None,
        }
    }

    pub fn signals(mut self, model: SignalModel) -> Self {
        self.signal_model = model;
        self
    }

    pub fn mismatch(mut self, model: MismatchModel) -> Self {
        self.mismatch_model = model;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn trials(mut self, trials: usize) -> Self {
        self.trials = trials;
        self
    }

    /// Uses `pool` as the signal distribution.
    pub fn dataset(mut self, pool: Vec<Signal>) -> Self {
        self.signal_model = SignalModel::Dataset;
        self.pool = Some(Arc::new(pool));
        self
    }

    pub fn geometry(&self) -> Result<Geometry> {
        match self.signal_model {
            SignalModel::Dataset => {
                let pool = self.pool_signals()?;
                Ok(pool[0].geometry())
            }
            _ => Ok(Geometry::Line { n: self.n }),
        }
    }

    pub fn signal_len(&self) -> Result<usize> {
        Ok(self.geometry()?.len())
    }

    pub fn pattern(&self) -> Result<OffsetPattern> {
        OffsetPattern::canonical(self.geometry()?, self.r)
    }

    fn pool_signals(&self) -> Result<&[Signal]> {
        match &self.pool {
            Some(pool) if !pool.is_empty() => Ok(pool),
            _ => Err(CaolError::EmptyDataset("synthetic dataset pool")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.k < self.r {
            return Err(CaolError::InvalidConfig(format!("need K >= R >= 1, got R = {}, K = {}", self.r, self.k)));
        }
        if self.l == 0 {
            return Err(CaolError::InvalidConfig("L must be >= 1".into()));
        }
        if self.trials == 0 {
            return Err(CaolError::InvalidConfig("trials must be >= 1".into()));
        }
        if !self.mismatch_model.params_valid() {
            return Err(CaolError::InvalidConfig(format!(
                "mismatch parameters must be finite and >= 0: {}",
                self.mismatch_model.label()
            )));
        }
        if self.signal_model == SignalModel::Dataset {
            let pool = self.pool_signals()?;
            let geometry = pool[0].geometry();
            if pool.iter().any(|s| s.geometry() != geometry) {
                return Err(CaolError::InvalidConfig("dataset pool mixes geometries".into()));
            }
        } else if self.n < self.r {
            return Err(CaolError::InvalidConfig(format!("need N >= R, got N = {}, R = {}", self.n, self.r)));
        }
        self.pattern()?.validate_for(self.geometry()?)?;
        Ok(())
    }

    pub fn label(&self) -> String {
        let signals = match self.signal_model {
            SignalModel::Gaussian => "gaussian",
            SignalModel::Impulse => "impulse",
            SignalModel::Dataset => "dataset",
        };
        format!(
            "N={} R={} K={} L={} signals={} mismatch={} seed={} trials={}",
            self.signal_len().unwrap_or(self.n),
            self.r,
            self.k,
            self.l,
            signals,
            self.mismatch_model.label(),
            self.seed,
            self.trials
        )
    }
}

/// Feasible bank `Q(G)^T / sqrt(R)` for a seeded Gaussian `G`.
pub fn random_orthogonal_filters(r: usize, k: usize, seed: u64) -> Result<FilterBank> {
    FilterBank::from_seed(r, k, seed)
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws signals and mismatches for one spec. Holds the fixed correlation direction.
struct Sampler<'a> {
    spec: &'a SynthSpec,
    pattern: OffsetPattern,
    n: usize,
    direction: DMatrix<f64>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, 0);
        let mut direction = DMatrix::from_fn(spec.r, spec.k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = direction.norm();
        direction /= norm;
        Ok(Sampler {
            spec,
            pattern: spec.pattern()?,
            n: spec.signal_len()?,
            direction,
        })
    }

    fn signal<G: Rng>(&self, rng: &mut G) -> Result<Signal> {
        match self.spec.signal_model {
            SignalModel::Gaussian => Signal::line((0..self.n).map(|_| rng.sample(StandardNormal)).collect()),
            SignalModel::Impulse => Signal::impulse(self.n, rng.random_range(0..self.n)),
            SignalModel::Dataset => {
                let pool = self.spec.pool_signals()?;
                Ok(pool[rng.random_range(0..pool.len())].clone())
            }
        }
    }

    fn ball<G: Rng>(&self, rng: &mut G, radius: f64) -> DMatrix<f64> {
        let k = self.spec.k;
        let mut g = DMatrix::from_fn(self.n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u: f64 = rng.random();
        let target = radius * u.powf(1.0 / (self.n * k) as f64);
        let norm = g.norm();
        if norm > 0.0 {
            g *= target / norm;
        }
        g
    }

    fn mismatch<G: Rng>(&self, rng: &mut G, lift: &LiftedOperator) -> DMatrix<f64> {
        let k = self.spec.k;
        match self.spec.mismatch_model {
            MismatchModel::Zero => DMatrix::zeros(self.n, k),
            MismatchModel::IidGaussian { std } => {
                DMatrix::from_fn(self.n, k, |_, _| std * rng.sample::<f64, _>(StandardNormal))
            }
            MismatchModel::BoundedBall { radius } => self.ball(rng, radius),
            MismatchModel::Correlated { c, noise_radius } => {
                lift.matrix() * &self.direction * c + self.ball(rng, noise_radius)
            }
        }
    }

    fn mismatches<G: Rng>(&self, rng: &mut G, lifts: &[LiftedOperator]) -> Result<MismatchSet> {
        MismatchSet::new(lifts.iter().map(|lift| self.mismatch(rng, lift)).collect())
    }
}

/// One synthetic dataset with codes `Z_l = Psi_l D_true + E_l`.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub signals: Vec<Signal>,
    pub lifts: Vec<LiftedOperator>,
    pub d_true: FilterBank,
    pub codes: CodeSet,
    pub mismatches: MismatchSet,
    /// Draws rejected for failing a rank hypothesis.
    pub rejections: usize,
}

fn codes_from(lifts: &[LiftedOperator], d_true: &FilterBank, mismatches: &MismatchSet) -> Result<CodeSet> {
    let mats = lifts
        .iter()
        .zip(mismatches.mats())
        .map(|(lift, e)| Ok(lift.apply(d_true.matrix())? + e))
        .collect::<Result<Vec<_>>>()?;
    CodeSet::new(mats)
}

fn full_row_rank(m: &DMatrix<f64>) -> bool {
    let s = singular_values(m);
    s[0] > 0.0 && *s.last().unwrap() > EPS_RANK * s[0]
}

/// Both rank hypotheses: `sum Psi^T Z` and `sum Psi^T Z_true` have full row rank.
fn rank_hypotheses_hold(lifts: &[LiftedOperator], codes: &CodeSet, d_true: &FilterBank) -> Result<bool> {
    let cross = cross_accumulate(lifts, codes.mats())?;
    let true_cross = gram_accumulate(lifts)? * d_true.matrix();
    Ok(full_row_rank(&cross) && full_row_rank(&true_cross))
}

fn instance_from_rng<G: Rng>(sampler: &Sampler, rng: &mut G) -> Result<SynthInstance> {
    let spec = sampler.spec;
    let d_true = FilterBank::random(spec.r, spec.k, rng)?;
    for rejections in 0..MAX_RANK_ATTEMPTS {
        let signals = (0..spec.l).map(|_| sampler.signal(rng)).collect::<Result<Vec<_>>>()?;
        let lifts = build_lifts(&signals, &sampler.pattern)?;
        let mismatches = sampler.mismatches(rng, &lifts)?;
        let codes = codes_from(&lifts, &d_true, &mismatches)?;
        if rank_hypotheses_hold(&lifts, &codes, &d_true)? {
            return Ok(SynthInstance {
                signals,
                lifts,
                d_true,
                codes,
                mismatches,
                rejections,
            });
        }
    }
    Err(CaolError::RankHypothesisUnsatisfiable(MAX_RANK_ATTEMPTS))
}

/// Instance for trial `trial` of `spec`.
pub fn synth_instance_trial(spec: &SynthSpec, trial: usize) -> Result<SynthInstance> {
    let sampler = Sampler::new(spec)?;
    instance_from_rng(&sampler, &mut stream(spec.seed, trial as u64 + 1))
}

pub fn synth_instance(spec: &SynthSpec) -> Result<SynthInstance> {
    synth_instance_trial(spec, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Deterministic,
    Expected,
    HighProbability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    /// `||D* - D_true||_F^2`.
    pub error: f64,
    /// The bound this trial is compared against.
    pub bound: f64,
    pub holds: bool,
    /// `error / bound` (NaN when both vanish).
    pub ratio: f64,
    /// Deterministic bound of the trial.
    pub det_bound: f64,
    pub rejections: usize,
}

impl TrialResult {
    fn new(trial: usize, error: f64, bound: f64, det_bound: f64, rejections: usize) -> Self {
        TrialResult {
            trial,
            error,
            bound,
            holds: error <= bound + VIOLATION_TOL,
            ratio: error / bound,
            det_bound,
            rejections,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpCheck {
    pub bound: HpBound,
    /// Fraction of trials with error at most the bound.
    pub coverage: f64,
    pub population_estimated: bool,
    /// Mean plug-in chi_bar over trials.
    pub chi_bar_mean: f64,
    pub chi_bar_population: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub check: Check,
    pub spec: String,
    pub trials: Vec<TrialResult>,
    /// `max(error - bound)` over trials; nonpositive when every trial holds.
    pub max_violation: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub rho_sq: Option<f64>,
    pub sigma_bar_sq: Option<f64>,
    pub expected_bound: Option<f64>,
    pub hp: Option<HpCheck>,
    pub passed: bool,
}

impl VerifyReport {
    fn summarize(check: Check, spec: &SynthSpec, trials: Vec<TrialResult>) -> Self {
        let t = trials.len() as f64;
        let mean = trials.iter().map(|r| r.error).sum::<f64>() / t;
        let var = if trials.len() > 1 {
            trials.iter().map(|r| (r.error - mean).powi(2)).sum::<f64>() / (t - 1.0)
        } else {
            0.0
        };
        let max_violation = trials.iter().map(|r| r.error - r.bound).fold(f64::NEG_INFINITY, f64::max);
        VerifyReport {
            check,
            spec: spec.label(),
            max_violation,
            mean_error: mean,
            std_error: (var / t).sqrt(),
            passed: trials.iter().all(|r| r.holds),
            trials,
            rho_sq: None,
            sigma_bar_sq: None,
            expected_bound: None,
            hp: None,
        }
    }

    /// First trial that breaks the checked inequality.
    pub fn first_failure(&self) -> Option<&TrialResult> {
        self.trials.iter().find(|t| !t.holds)
    }
}

fn filter_error(instance_lifts: &[LiftedOperator], codes: &CodeSet, d_true: &FilterBank) -> Result<f64> {
    let d_star = filter_update(instance_lifts, codes)?;
    Ok((d_star.matrix() - d_true.matrix()).norm_squared())
}

fn run_trials<F>(trials: usize, f: F) -> Result<Vec<TrialResult>>
where
    F: Fn(usize) -> Result<TrialResult> + Sync + Send,
{
    (0..trials).into_par_iter().map(f).collect()
}

/// Checks the deterministic bound on every trial.
pub fn verify_det_bound(spec: &SynthSpec) -> Result<VerifyReport> {
    verify_det_bound_perturbed(spec, None)
}

/// As [`verify_det_bound`], but with `perturb = Some(p)` each compared bound is replaced
/// by `error + p`. Test hook for the failure path.
pub fn verify_det_bound_perturbed(spec: &SynthSpec, perturb: Option<f64>) -> Result<VerifyReport> {
    let sampler = Sampler::new(spec)?;
    let trials = run_trials(spec.trials, |t| {
        let inst = instance_from_rng(&sampler, &mut stream(spec.seed, t as u64 + 1))?;
        let error = filter_error(&inst.lifts, &inst.codes, &inst.d_true)?;
        let det = det_error_bound(&inst.lifts, &inst.mismatches)?.bound;
        let bound = perturb.map_or(det, |p| error + p);
        Ok(TrialResult::new(t, error, bound, det, inst.rejections))
    })?;
    Ok(VerifyReport::summarize(Check::Deterministic, spec, trials))
}

/// `max_l lambda_max(E{E_l E_l^T})` for a zero-mean model, in closed form.
pub fn sigma_bar_sq_analytic(model: MismatchModel, n: usize, k: usize) -> Option<f64> {
    match model {
        MismatchModel::Zero => Some(0.0),
        MismatchModel::IidGaussian { std } => Some(k as f64 * std * std),
        MismatchModel::BoundedBall { radius } => Some(k as f64 * radius * radius / (n * k + 2) as f64),
        MismatchModel::Correlated { .. } => None,
    }
}

/// Monte Carlo check of the expected bound: signals and `D_true` fixed, mismatch redrawn
/// each trial. Passes when the mean error is within two standard errors of the bound.
pub fn monte_carlo_expected(spec: &SynthSpec) -> Result<VerifyReport> {
    if !spec.mismatch_model.is_zero_mean() {
        return Err(CaolError::InvalidConfig(format!(
            "the expected bound needs zero-mean mismatch, got {}",
            spec.mismatch_model.label()
        )));
    }
    let sampler = Sampler::new(spec)?;
    let base = instance_from_rng(&sampler, &mut stream(spec.seed, 1))?;
    let gram = gram_accumulate(&base.lifts)?;
    let rho_sq = rho_squared_from_gram(&gram)?;
    let sigma_bar_sq = sigma_bar_sq_analytic(spec.mismatch_model, sampler.n, spec.k).expect("zero-mean model");
    let bound = expected_bound(sigma_bar_sq, rho_sq);

    let trials = run_trials(spec.trials, |t| {
        let mut rng = stream(spec.seed, t as u64 + 2);
        for rejections in 0..MAX_RANK_ATTEMPTS {
            let mismatches = sampler.mismatches(&mut rng, &base.lifts)?;
            let codes = codes_from(&base.lifts, &base.d_true, &mismatches)?;
            if !rank_hypotheses_hold(&base.lifts, &codes, &base.d_true)? {
                continue;
            }
            let error = filter_error(&base.lifts, &codes, &base.d_true)?;
            let det = det_error_bound(&base.lifts, &mismatches)?.bound;
            // Per-trial comparison is against the deterministic bound; the expected
            // bound is judged on the mean below.
            return Ok(TrialResult::new(t, error, det, det, rejections));
        }
        Err(CaolError::RankHypothesisUnsatisfiable(MAX_RANK_ATTEMPTS))
    })?;
    let mut report = VerifyReport::summarize(Check::Expected, spec, trials);
    report.rho_sq = Some(rho_sq);
    report.sigma_bar_sq = Some(sigma_bar_sq);
    report.expected_bound = Some(bound);
    report.passed = report.passed && report.mean_error <= bound + 2.0 * report.std_error;
    Ok(report)
}

/// Population ensemble statistics for a spec, with `samples = spec.l`.
///
/// Closed forms are used where they exist: impulses give `Lambda = I`, `gamma = 1`;
/// Gaussian signals give `Lambda = N I`; a dataset pool gives its exact mean Gram and
/// largest norm. Zero-mean mismatch independent of the signal has `E(Psi^T E) = 0`, and
/// the correlated model has `E(Psi^T E) = c Lambda P`. Gaussian signal norms and Gaussian
/// mismatch norms have no almost-sure bound; for those `gamma` or `sigma` is the maximum
/// over held-out draws and the result is marked as estimated.
pub fn population_stats(spec: &SynthSpec) -> Result<EnsembleStats> {
    let sampler = Sampler::new(spec)?;
    let (r, k, n) = (spec.r, spec.k, sampler.n);
    let mut estimated = false;
    let (lambda_bar, gamma) = match spec.signal_model {
        SignalModel::Impulse => (DMatrix::identity(r, r), 1.0),
        SignalModel::Gaussian => {
            estimated = true;
            let mut rng = stream(spec.seed, u64::MAX);
            let gamma = (0..HELD_OUT_DRAWS)
                .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            (DMatrix::identity(r, r) * n as f64, gamma)
        }
        SignalModel::Dataset => {
            let pool = spec.pool_signals()?;
            let lifts = build_lifts(pool, &sampler.pattern)?;
            let gamma = pool.iter().map(Signal::norm).fold(0.0, f64::max);
            (gram_accumulate(&lifts)? / pool.len() as f64, gamma)
        }
    };
    let (corr, sigma) = match spec.mismatch_model {
        MismatchModel::Zero => (DMatrix::zeros(r, k), 0.0),
        MismatchModel::BoundedBall { radius } => (DMatrix::zeros(r, k), radius),
        MismatchModel::IidGaussian { std } => {
            estimated = true;
            let mut rng = stream(spec.seed, u64::MAX - 1);
            let sigma = (0..HELD_OUT_DRAWS)
                .map(|_| {
                    (0..n * k)
                        .map(|_| (std * rng.sample::<f64, _>(StandardNormal)).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            (DMatrix::zeros(r, k), sigma)
        }
        MismatchModel::Correlated { c, noise_radius } => {
            // ||c Psi P||_F <= c ||Psi||_2 ||P||_F <= c gamma sqrt(R).
            let sigma = c * gamma * (r as f64).sqrt() + noise_radius;
            (&lambda_bar * &sampler.direction * c, sigma)
        }
    };
    Ok(EnsembleStats {
        lambda_bar,
        gamma,
        sigma,
        corr,
        samples: spec.l,
        estimated,
    })
}

/// Monte Carlo coverage of the high-probability bound with fresh i.i.d. pairs
/// `(x_l, E_l)` in every trial. Passes when the bound is vacuous or the empirical
/// coverage reaches the stated probability.
pub fn monte_carlo_hp(spec: &SynthSpec, delta: f64) -> Result<VerifyReport> {
    let population = population_stats(spec)?;
    let hp = hp_bound(&population, delta, spec.l)?;
    let lambda_min = population.lambda_min()?;
    let sampler = Sampler::new(spec)?;
    let results: Vec<(TrialResult, f64)> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let inst = instance_from_rng(&sampler, &mut stream(spec.seed, t as u64 + 1))?;
            let error = filter_error(&inst.lifts, &inst.codes, &inst.d_true)?;
            let det = det_error_bound(&inst.lifts, &inst.mismatches)?.bound;
            let corr = cross_accumulate(&inst.lifts, inst.mismatches.mats())? / spec.l as f64;
            let chi = corr.norm() / lambda_min;
            Ok((TrialResult::new(t, error, hp.bound, det, inst.rejections), chi))
        })
        .collect::<Result<_>>()?;
    let chi_bar_mean = results.iter().map(|(_, c)| c).sum::<f64>() / results.len() as f64;
    let trials: Vec<TrialResult> = results.into_iter().map(|(t, _)| t).collect();
    let coverage = trials.iter().filter(|t| t.holds).count() as f64 / trials.len() as f64;
    let mut report = VerifyReport::summarize(Check::HighProbability, spec, trials);
    report.passed = hp.vacuous || coverage >= hp.prob;
    report.hp = Some(HpCheck {
        bound: hp,
        coverage,
        population_estimated: population.estimated,
        chi_bar_mean,
        chi_bar_population: population.corr.norm() / lambda_min,
    });
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub l: usize,
    pub rho_sq_mean: f64,
    pub rho_sq_std: f64,
    pub replicates: usize,
}

/// Mean and sample standard deviation of `rho^2` over random subsets of each size in
/// `l_grid`. The full dataset is used once when a size equals the dataset size.
pub fn rho_scan(
    signals: &[Signal],
    pattern: &OffsetPattern,
    l_grid: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<Vec<RhoRow>> {
    if signals.is_empty() {
        return Err(CaolError::EmptyDataset("rho_scan"));
    }
    if replicates == 0 {
        return Err(CaolError::InvalidConfig("rho_scan needs at least one replicate".into()));
    }
    let available = signals.len();
    if let Some(&bad) = l_grid.iter().find(|&&l| l == 0 || l > available) {
        return Err(CaolError::InvalidConfig(format!(
            "sample count {bad} outside 1..={available} available signals"
        )));
    }
    let grams: Vec<DMatrix<f64>> = signals
        .par_iter()
        .map(|x| Ok(build_lift(x, pattern)?.gram()))
        .collect::<Result<_>>()?;
    let r = pattern.len();
    let subset_rho = |idx: &[usize]| {
        let g = idx.iter().fold(DMatrix::zeros(r, r), |acc, &i| acc + &grams[i]);
        rho_squared_from_gram(&g)
    };
    l_grid
        .iter()
        .enumerate()
        .map(|(row, &l)| {
            let values: Vec<f64> = if l == available {
                vec![subset_rho(&(0..available).collect::<Vec<_>>())?]
            } else {
                let mut rng = stream(seed, row as u64);
                (0..replicates)
                    .map(|_| subset_rho(&sample(&mut rng, available, l).into_vec()))
                    .collect::<Result<_>>()?
            };
            let m = values.len() as f64;
            let mean = values.iter().sum::<f64>() / m;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(RhoRow {
                l,
                rho_sq_mean: mean,
                rho_sq_std: std,
                replicates: values.len(),
            })
        })
        .collect()
}

/// Least-squares slope of `ln(mean rho^2)` against `ln(L)`.
pub fn loglog_slope(rows: &[RhoRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.l as f64).ln(), r.rho_sq_mean.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiRow {
    pub iteration: usize,
    pub chi_bar: f64,
}

/// Iterations visited by [`chi_track`]: 1, every multiple of `stride`, and the last.
pub fn chi_iterations(last: usize, stride: usize) -> Vec<usize> {
    let mut its = vec![1];
    its.extend((1..=last / stride).map(|m| m * stride).filter(|&i| i > 1));
    if *its.last().unwrap() != last {
        its.push(last);
    }
    its
}

/// Plug-in `chi_bar` along a training trace, with mismatch measured against `d_ref`
/// (usually the converged filters). Codes of each visited iteration are rebuilt from
/// the snapshot filters that produced them.
pub fn chi_track(trace: &TrainTrace, lifts: &[LiftedOperator], d_ref: &DMatrix<f64>, stride: usize) -> Result<Vec<ChiRow>> {
    if stride == 0 {
        return Err(CaolError::InvalidConfig("chi stride must be >= 1".into()));
    }
    let last = trace.iterations();
    if last == 0 {
        return Err(CaolError::MissingSnapshots(1));
    }
    let gram = gram_accumulate(lifts)?;
    let l = lifts.len() as f64;
    let (lambda_min, _) = lambda_min_checked("chi_track", &(gram / l))?;
    chi_iterations(last, stride)
        .into_iter()
        .map(|i| {
            let snap = trace.snapshot(i).ok_or(CaolError::MissingSnapshots(i))?;
            let codes = sparse_code_update_all(&snap.code_filters, lifts, trace.alpha)?;
            let e = mismatch_from_codes(&codes, lifts, d_ref)?;
            let corr = cross_accumulate(lifts, e.mats())? / l;
            Ok(ChiRow {
                iteration: i,
                chi_bar: corr.norm() / lambda_min,
            })
        })
        .collect()
}

/// Copies chi values into the matching trace snapshots.
pub fn annotate_chi(trace: &mut TrainTrace, rows: &[ChiRow]) {
    for row in rows {
        if let Some(s) = trace.snapshots.iter_mut().find(|s| s.iteration == row.iteration) {
            s.chi_bar = Some(row.chi_bar);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{caol_train, TrainConfig};

    #[test]
    fn random_filters_are_feasible() {
        for (r, k, seed) in [(1, 1, 0), (3, 5, 1), (8, 8, 2)] {
            let d = random_orthogonal_filters(r, k, seed).unwrap();
            let err = (d.matrix() * d.matrix().transpose() - DMatrix::identity(r, r) / r as f64).norm();
            assert!(err <= 1e-12);
        }
    }

    #[test]
    fn zero_mismatch_codes_are_exact() {
        let spec = SynthSpec::new(16, 3, 4, 5).seed(3);
        let inst = synth_instance(&spec).unwrap();
        for (lift, z) in inst.lifts.iter().zip(inst.codes.mats()) {
            assert_eq!(&lift.apply(inst.d_true.matrix()).unwrap(), z);
        }
    }

    #[test]
    fn impulse_instance_gram_is_scaled_identity() {
        let spec = SynthSpec::new(10, 4, 4, 7)
            .signals(SignalModel::Impulse)
            .mismatch(MismatchModel::IidGaussian { std: 0.3 });
        let inst = synth_instance(&spec).unwrap();
        assert_eq!(gram_accumulate(&inst.lifts).unwrap(), DMatrix::identity(4, 4) * 7.0);
    }

    #[test]
    fn gaussian_rank_rejections_are_rare() {
        let spec = SynthSpec::new(8, 4, 4, 2)
            .mismatch(MismatchModel::IidGaussian { std: 0.1 })
            .seed(17);
        let rejected: usize = (0..1000).map(|t| synth_instance_trial(&spec, t).unwrap().rejections).sum();
        assert!((rejected as f64) < 0.01 * 1000.0);
    }

    #[test]
    fn pathological_pool_is_reported() {
        let spec = SynthSpec::new(0, 2, 2, 3).dataset(vec![Signal::line(vec![0.0; 6]).unwrap()]);
        assert!(matches!(
            synth_instance(&spec),
            Err(CaolError::RankHypothesisUnsatisfiable(MAX_RANK_ATTEMPTS))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::new(8, 4, 3, 2).validate().is_err());
        assert!(SynthSpec::new(8, 2, 2, 2).trials(0).validate().is_err());
        assert!(SynthSpec::new(3, 4, 4, 2).validate().is_err());
        assert!(SynthSpec::new(8, 2, 2, 2)
            .mismatch(MismatchModel::IidGaussian { std: -1.0 })
            .validate()
            .is_err());
    }

    #[test]
    fn det_verify_zero_mismatch() {
        let spec = SynthSpec::new(32, 4, 4, 6).trials(5);
        let rep = verify_det_bound(&spec).unwrap();
        assert!(rep.passed);
        for t in &rep.trials {
            assert_eq!(t.bound, 0.0);
            assert!(t.error <= 1e-16);
        }
        let bad = verify_det_bound_perturbed(&spec, Some(-1e-3)).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.first_failure().unwrap().trial, 0);
    }

    #[test]
    fn det_verify_gaussian_small() {
        let spec = SynthSpec::new(64, 4, 6, 8)
            .mismatch(MismatchModel::IidGaussian { std: 0.5 })
            .trials(20)
            .seed(2);
        let rep = verify_det_bound(&spec).unwrap();
        assert!(rep.passed, "max violation {}", rep.max_violation);
        assert!(rep.trials.iter().all(|t| t.ratio <= 1.0));
    }

    #[test]
    fn reports_are_reproducible() {
        let spec = SynthSpec::new(32, 3, 3, 4)
            .mismatch(MismatchModel::BoundedBall { radius: 1.0 })
            .trials(8)
            .seed(5);
        assert_eq!(verify_det_bound(&spec).unwrap(), verify_det_bound(&spec).unwrap());
    }

    #[test]
    fn expected_rejects_correlated_model() {
        let spec = SynthSpec::new(16, 2, 2, 4).mismatch(MismatchModel::Correlated { c: 0.1, noise_radius: 0.0 });
        assert!(matches!(monte_carlo_expected(&spec), Err(CaolError::InvalidConfig(_))));
    }

    #[test]
    fn expected_bound_on_impulses() {
        let spec = SynthSpec::new(16, 2, 4, 8)
            .signals(SignalModel::Impulse)
            .mismatch(MismatchModel::IidGaussian { std: 0.5 })
            .trials(100);
        let rep = monte_carlo_expected(&spec).unwrap();
        assert!((rep.rho_sq.unwrap() - 2.0 / 8.0).abs() < 1e-14);
        assert!((rep.sigma_bar_sq.unwrap() - 1.0).abs() < 1e-14);
        assert!((rep.expected_bound.unwrap() - 5.0 * 2.0 / 8.0).abs() < 1e-14);
        assert!(rep.passed);

        let zero = monte_carlo_expected(&SynthSpec::new(16, 2, 2, 4).signals(SignalModel::Impulse).trials(3)).unwrap();
        assert_eq!(zero.expected_bound, Some(0.0));
        assert!(zero.mean_error <= 1e-20);
    }

    #[test]
    fn ball_mismatch_respects_radius() {
        let spec = SynthSpec::new(12, 3, 4, 50).mismatch(MismatchModel::BoundedBall { radius: 2.0 });
        let inst = synth_instance(&spec).unwrap();
        assert!(inst.mismatches.max_frobenius() <= 2.0);
    }

    #[test]
    fn population_stats_closed_forms() {
        let spec = SynthSpec::new(8, 4, 4, 100)
            .signals(SignalModel::Impulse)
            .mismatch(MismatchModel::BoundedBall { radius: 0.5 });
        let pop = population_stats(&spec).unwrap();
        assert_eq!(pop.lambda_bar, DMatrix::identity(4, 4));
        assert_eq!((pop.gamma, pop.sigma), (1.0, 0.5));
        assert!(!pop.estimated);
        assert_eq!(pop.corr.norm(), 0.0);

        let corr = population_stats(&spec.clone().mismatch(MismatchModel::Correlated { c: 0.2, noise_radius: 0.1 })).unwrap();
        assert!((corr.corr.norm() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn hp_delta_out_of_range() {
        let spec = SynthSpec::new(8, 4, 4, 100)
            .signals(SignalModel::Impulse)
            .mismatch(MismatchModel::BoundedBall { radius: 0.5 });
        assert!(matches!(monte_carlo_hp(&spec, 0.125), Err(CaolError::DeltaOutOfRange { .. })));
    }

    #[test]
    fn hp_vacuous_probability_skips_coverage() {
        let spec = SynthSpec::new(8, 4, 4, 20)
            .signals(SignalModel::Impulse)
            .mismatch(MismatchModel::BoundedBall { radius: 0.5 })
            .trials(5);
        let rep = monte_carlo_hp(&spec, 0.05).unwrap();
        let hp = rep.hp.unwrap();
        assert!(hp.bound.vacuous);
        assert!(rep.passed);
    }

    #[test]
    fn correlated_mismatch_leaves_a_floor() {
        let base = SynthSpec::new(8, 4, 4, 1000)
            .signals(SignalModel::Impulse)
            .mismatch(MismatchModel::Correlated { c: 0.3, noise_radius: 0.2 })
            .trials(20);
        let rep = monte_carlo_hp(&base, 0.01).unwrap();
        let hp = rep.hp.unwrap();
        assert!(hp.chi_bar_mean > 0.0);
        assert!((hp.chi_bar_population - 0.3).abs() < 1e-12);

        let pop = population_stats(&base).unwrap();
        let floor = {
            let num = pop.corr.norm() + 2.0 * pop.sigma * pop.gamma * 2.0 * 0.01;
            let den = 1.0 - 2.0 * 4.0 * 0.01;
            5.0 * (num / den).powi(2)
        };
        for l in [1_000usize, 100_000, 10_000_000] {
            let b = hp_bound(&pop, 0.01, l).unwrap().bound;
            assert!(b >= floor);
        }
    }

    #[test]
    fn rho_scan_on_impulses_is_exact() {
        let signals: Vec<_> = (0..16).map(|i| Signal::impulse(20, i).unwrap()).collect();
        let p = OffsetPattern::line(5).unwrap();
        let rows = rho_scan(&signals, &p, &[1, 2, 4, 8, 16], 10, 0).unwrap();
        for row in &rows {
            assert!((row.rho_sq_mean - 5.0 / row.l as f64).abs() <= 1e-12 * row.rho_sq_mean);
            assert!(row.rho_sq_std <= 1e-12);
        }
        assert_eq!(rows.last().unwrap().replicates, 1);
        assert!(rho_scan(&signals, &p, &[17], 10, 0).is_err());
        assert!(rho_scan(&[], &p, &[1], 10, 0).is_err());
    }

    #[test]
    fn chi_iteration_schedule() {
        assert_eq!(chi_iterations(120, 50), vec![1, 50, 100, 120]);
        assert_eq!(chi_iterations(100, 50), vec![1, 50, 100]);
        assert_eq!(chi_iterations(1, 50), vec![1]);
        assert_eq!(chi_iterations(7, 1), (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn chi_track_zero_mismatch_is_zero() {
        // True filters, codes untouched by thresholding: every mismatch vanishes.
        let p = OffsetPattern::line(3).unwrap();
        let signals: Vec<_> = (0..5).map(|i| Signal::impulse(9, i).unwrap()).collect();
        let d = FilterBank::from_seed(3, 3, 1).unwrap();
        let min = d.matrix().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let config = TrainConfig {
            alpha: 0.25 * min * min,
            ..TrainConfig::default()
        };
        let out = caol_train(&signals, &p, 3, &config, Some(d.clone())).unwrap();
        let lifts = build_lifts(&signals, &p).unwrap();
        let rows = chi_track(&out.trace, &lifts, d.matrix(), DEFAULT_CHI_STRIDE).unwrap();
        assert!(rows.iter().all(|r| r.chi_bar <= 1e-14));
    }

    #[test]
    fn chi_track_requires_snapshots() {
        let p = OffsetPattern::line(2).unwrap();
        let signals: Vec<_> = (0..3)
            .map(|i| Signal::line((0..10).map(|j| ((i * 10 + j) as f64).sin()).collect()).unwrap())
            .collect();
        let config = TrainConfig {
            alpha: 1e-3,
            max_iters: 60,
            rel_tol: 0.0,
            seed: 1,
            record_every: 50,
        };
        let out = caol_train(&signals, &p, 2, &config, None).unwrap();
        let lifts = build_lifts(&signals, &p).unwrap();
        assert!(matches!(
            chi_track(&out.trace, &lifts, out.filters.matrix(), 20),
            Err(CaolError::MissingSnapshots(20))
        ));
        assert!(chi_track(&out.trace, &lifts, out.filters.matrix(), 50).is_ok());
    }
}
