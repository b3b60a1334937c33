use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading IDX files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX dimensions overflow: {dims:?}")]
    DimensionOverflow { dims: Vec<u32> },
    #[error("label {label} at index {index} is outside 0..=9")]
    LabelOutOfRange { index: usize, label: u8 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error("unsupported image size {height}x{width}")]
    UnsupportedSize { height: usize, width: usize },
    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: String, found: String },
    #[error("{0} images but {1} labels")]
    CountMismatch(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("ragged input: vector {index} has dimension {found}, expected {expected}")]
    Ragged {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite matrix entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("degenerate x values: all {0} points share the same abscissa")]
    DegenerateAbscissa(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate data: AC correlation is zero (all inputs constant)")]
    DegenerateData,
    #[error("stage 1 degenerate at block positions {0:?}")]
    DegeneratePositions(Vec<usize>),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("zero total energy in spectrum")]
    ZeroEnergy,
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("no inlier found after {attempts} attempts")]
    RejectionExhausted { attempts: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("model file checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
