use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("all mixture responsibilities underflowed at x={x:?}, sigma={sigma}")]
    Underflow { x: Vec<f64>, sigma: f64 },

    #[error("non-finite state after denoising step {step}")]
    NonFiniteStep { step: usize },

    #[error("no checkpoint for step {0}")]
    MissingCheckpoint(usize),

    #[error("no normalization statistics for step {0}")]
    MissingNormalizer(usize),

    #[error("training diverged at step {step}, batch {batch} (last finite loss {last_finite_loss:?}); lower the learning rate")]
    Divergence {
        step: usize,
        batch: usize,
        last_finite_loss: Option<f64>,
    },

    #[error("no valid preference pairs: {0}")]
    NoPairs(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("requested {requested} candidates but the pool holds {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("budget {budget} is not on the curve grid")]
    OffGrid { budget: f64 },

    #[error("budget grid is not uniform")]
    NonUniformGrid,

    #[error("relative performance undefined: reference integrated gain is zero")]
    ZeroReferenceGain,

    #[error("pool file {path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("pool file {path}: format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("pool file {path}: schedule hash {found} does not match expected {expected}")]
    ScheduleHashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("pool file {path}: truncated (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("missing input file {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::Underflow { .. } => "underflow",
            Error::NonFiniteStep { .. } => "non_finite_step",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::MissingNormalizer(_) => "missing_normalizer",
            Error::Divergence { .. } => "divergence",
            Error::NoPairs(_) => "no_pairs",
            Error::Shape(_) => "shape",
            Error::PoolTooSmall { .. } => "pool_too_small",
            Error::OffGrid { .. } => "off_grid",
            Error::NonUniformGrid => "non_uniform_grid",
            Error::ZeroReferenceGain => "zero_reference_gain",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::ScheduleHashMismatch { .. } => "schedule_hash_mismatch",
            Error::Truncated { .. } => "truncated",
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
        })
    }
}
