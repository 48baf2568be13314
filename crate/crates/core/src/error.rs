//! Crate-wide error type and the process exit-code contract.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, empty axes, bad axis index).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A scalar argument is outside its legal range (dropout rate, std, fractions).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Model/run configuration is inconsistent (head count, unfreeze depth, presets).
    #[error("configuration error: {0}")]
    Config(String),

    /// A fixed-capacity resource would be exceeded (positional table rows).
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A label is outside {0, 1}.
    #[error("label error: {0}")]
    Label(String),

    /// Malformed runtime input (empty lists, length mismatches).
    #[error("input error: {0}")]
    Input(String),

    /// A dataset cannot be partitioned as requested.
    #[error("partition error: {0}")]
    Partition(String),

    /// A metric has no defined value on this input (single-class AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// On-disk data is unusable (unreadable tree, undecodable image).
    #[error("data error: {0}")]
    Data(String),

    /// A serialized artifact has bad magic, version, or structure.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Capacity(_) | Error::Partition(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
