//! Convolutional analysis operator learning with orthogonal filters.
//!
//! Signals are lifted into matrices of cyclic shifts ([`conv`]), filter banks are
//! learned by alternating hard thresholding and an orthogonal Procrustes update
//! ([`train`], [`procrustes`]), and the error of the filter update against known
//! filters is bounded in deterministic, expected and high-probability form
//! ([`bounds`]). [`synth`] generates instances with ground truth and checks the bounds
//! by Monte Carlo; [`ingest`] reads image and tensor data; [`cli`] backs the `caol`
//! binary.

pub mod bounds;
pub mod cli;
pub mod conv;
pub mod error;
pub mod ingest;
pub mod linalg;
pub mod procrustes;
pub mod signal;
pub mod synth;
pub mod train;

pub use bounds::{
    det_error_bound, expected_bound, hp_bound, rho_bar_chi_bar, rho_squared, sigma_bar_sq, BoundReport, DetBound,
    EnsembleStats, HpBound, MismatchSet,
};
pub use conv::{build_lift, build_lifts, convolve, cyclic_shift, LiftedOperator};
pub use error::{CaolError, ErrorClass, Result};
pub use procrustes::{filter_update, polar_factor, FilterBank};
pub use signal::{Geometry, Offset, OffsetPattern, Signal};
pub use synth::{
    chi_track, monte_carlo_expected, monte_carlo_hp, random_orthogonal_filters, rho_scan, synth_instance,
    verify_det_bound, MismatchModel, SignalModel, SynthSpec, VerifyReport,
};
pub use train::{caol_train, hard_threshold, objective, sparse_code_update, CodeSet, TrainConfig, TrainOutput, TrainTrace};
