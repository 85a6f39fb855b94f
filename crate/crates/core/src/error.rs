use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CaolError>;

/// Broad class of a failure, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum CaolError {
    #[error("invalid shift offset {offset} for geometry {geometry}")]
    InvalidOffset { offset: String, geometry: String },

    #[error("invalid offset pattern: {0}")]
    InvalidPattern(String),

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("empty dataset in {0}")]
    EmptyDataset(&'static str),

    #[error("rank deficient in {context}{}: smallest {min:e} vs largest {max:e}", iteration_suffix(.iteration))]
    RankDeficient {
        context: &'static str,
        min: f64,
        max: f64,
        iteration: Option<usize>,
    },

    #[error("filter bank violates D D^T = I/R (max entry error {0:e})")]
    NotTightFrame(f64),

    #[error("delta {delta} outside the admissible interval (0, {upper})")]
    DeltaOutOfRange { delta: f64, upper: f64 },

    #[error("rank hypothesis unsatisfiable after {0} attempts")]
    RankHypothesisUnsatisfiable(usize),

    #[error("trace has no snapshot for iteration {0}")]
    MissingSnapshots(usize),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("declared dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("truncated data: expected {expected} values, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("unknown preprocessing step '{0}'")]
    UnknownStep(String),

    #[error("patch {ph}x{pw} larger than image {h}x{w}")]
    PatchTooLarge {
        ph: usize,
        pw: usize,
        h: usize,
        w: usize,
    },

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn iteration_suffix(iteration: &Option<usize>) -> String {
    match iteration {
        Some(i) => format!(" at iteration {i}"),
        None => String::new(),
    }
}

impl CaolError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CaolError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use CaolError::*;
        match self {
            RankDeficient { .. } | NotTightFrame(_) | RankHypothesisUnsatisfiable(_) => {
                ErrorClass::Numerical
            }
            MalformedHeader(_)
            | BadMagic
            | DimensionOverflow(_)
            | TruncatedData { .. }
            | ChecksumMismatch(_)
            | InvalidSignal(_)
            | PatchTooLarge { .. }
            | Io { .. }
            | Json(_) => ErrorClass::Data,
            InvalidOffset { .. }
            | InvalidPattern(_)
            | DimensionMismatch { .. }
            | EmptyDataset(_)
            | DeltaOutOfRange { .. }
            | MissingSnapshots(_)
            | UnknownStep(_)
            | InvalidConfig(_) => ErrorClass::Config,
        }
    }

    /// Library module the failure originates from.
    pub fn module(&self) -> &'static str {
        use CaolError::*;
        match self {
            InvalidOffset { .. } | InvalidPattern(_) | InvalidSignal(_) => "conv",
            DimensionMismatch { .. } | EmptyDataset(_) => "conv",
            RankDeficient { .. } | NotTightFrame(_) => "filters",
            DeltaOutOfRange { .. } => "bounds",
            RankHypothesisUnsatisfiable(_) | MissingSnapshots(_) => "synth",
            MalformedHeader(_)
            | BadMagic
            | DimensionOverflow(_)
            | TruncatedData { .. }
            | UnknownStep(_)
            | PatchTooLarge { .. }
            | ChecksumMismatch(_) => "ingest",
            InvalidConfig(_) | Io { .. } | Json(_) => "report",
        }
    }

    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        CaolError::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
