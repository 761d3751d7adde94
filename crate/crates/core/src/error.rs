use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("overflow in {op}: result is not finite")]
    Overflow { op: &'static str },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    Detached,

    #[error("tape is frozen after backward; record a new tape for the next pass")]
    TapeFrozen,

    #[error("invalid kernel: negative score {score} at ({row}, {col}) inside the visible set")]
    InvalidKernel { row: usize, col: usize, score: f64 },

    #[error("degenerate denominator at row {row}: visible score sum {sum} < {eps}")]
    DegenerateDenominator { row: usize, sum: f64, eps: f64 },

    #[error("empty visibility: query {row} sees no keys")]
    EmptyVisibility { row: usize },

    #[error("position {position} out of range (limit {limit})")]
    PositionOutOfRange { position: i64, limit: usize },

    #[error("odd dimension {0}: sinusoidal tables and relative kernels need an even width")]
    OddDimension(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint dimension mismatch for {name}: file has {found:?}, config expects {expected:?}")]
    DimensionMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint was written for a different model config")]
    ConfigDigestMismatch,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors that mean "this kernel/config cannot be trained", as opposed to
    /// programming or I/O failures. Training reports these as divergence.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Overflow { .. }
                | Error::NonFinite(_)
                | Error::InvalidKernel { .. }
                | Error::DegenerateDenominator { .. }
        )
    }
}
