use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("circulant width {width} outside 1..={len}")]
    WidthOutOfRange { width: usize, len: usize },

    #[error("matrix is zero, no rank-one factor exists")]
    NoFactor,

    #[error("sparsity {sparsity} exceeds length {len}")]
    SparsityTooLarge { sparsity: usize, len: usize },

    #[error("invalid sparsity profile: {0}")]
    InvalidProfile(String),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid support: {0}")]
    InvalidSupport(String),

    #[error("dense operator needs {required} bytes, budget is {budget}")]
    DenseBudgetExceeded { required: usize, budget: usize },

    #[error("least squares on {support} columns with only {rows} rows is ill-posed")]
    IllPosed { support: usize, rows: usize },

    #[error("least squares failed: {0}")]
    LeastSquares(String),

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("encryption key is empty")]
    EmptyKey,

    #[error("message space C({len},{sparsity})*2^{} does not fit in 127 bits", .sparsity - 1)]
    MessageSpaceTooLarge { len: usize, sparsity: usize },

    #[error("message index {0} outside the message space")]
    MessageOutOfRange(u128),

    #[error("malformed codebook dump: {0}")]
    Codebook(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
