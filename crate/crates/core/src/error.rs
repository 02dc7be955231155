use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {actual} does not match shape volume {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("tensor entries must be finite")]
    NonFinite,
    #[error("mode {mode} out of range for rank {rank}")]
    ModeOutOfRange { mode: usize, rank: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("loss must be a real scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable belongs to a different tape")]
    ForeignVariable,
}

/// Errors raised while building or evaluating fields and models.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("coordinate {value} outside domain [{lo}, {hi}] on axis {axis}")]
    OutOfDomain { axis: usize, value: f64, lo: f64, hi: f64 },
    #[error("axis {axis} out of range for a {dims}-dimensional field")]
    InvalidAxis { axis: usize, dims: usize },
    #[error("degenerate interval [{lo}, {hi}] on axis {axis}")]
    DegenerateInterval { axis: usize, lo: f64, hi: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("unsupported transform length {0}: only products of 2, 3, 5 and 7 are supported")]
    UnsupportedLength(usize),
    #[error("invalid sampling specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("window of size {window} does not fit image of shape {shape:?}")]
    WindowTooLarge { window: usize, shape: Vec<usize> },
    #[error("reference volume is constant; dynamic range is zero")]
    ConstantReference,
}

/// Top-level error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for command-line use: 2 for validation problems,
    /// 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
