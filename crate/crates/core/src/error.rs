use thiserror::Error;

/// Errors raised by model evaluation, training and I/O.
#[derive(Debug, Error)]
pub enum MfaError {
    #[error("Cholesky factorization of L failed for component {component}")]
    CholeskyFailure { component: usize },

    #[error("truncation set of data point {0} is empty")]
    EmptyKSet(usize),

    #[error("search space holds {available} candidates, {required} required")]
    InsufficientCandidates { available: usize, required: usize },

    #[error("latent moment matrix E_c of component {0} is singular")]
    SingularEc(usize),

    #[error("dataset has {distinct} distinct rows, {required} seeds requested")]
    DegenerateData { distinct: usize, required: usize },

    #[error("no convergence within {iterations} iterations")]
    MaxIterExceeded { iterations: usize },

    #[error("target NLL {target} not reached within {iterations} iterations (best {best})")]
    TargetUnreachable {
        target: f64,
        best: f64,
        iterations: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("bad magic bytes")]
    BadMagic,

    #[error("file is truncated")]
    TruncatedFile,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("csv import: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfaError>;
