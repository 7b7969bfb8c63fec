//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An input value violates a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration (bad preset name, missing context labels, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed external data (IDX files, map files, CSV).
    #[error("format error: {0}")]
    Format(String),

    /// A NaN/Inf was produced where the contract requires finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A mixture component lost all responsibility mass within a group.
    #[error("degenerate component: {0}")]
    DegenerateComponent(String),

    /// Invariant violation inside the crate (e.g. backward fed a foreign cache).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 configuration, 3 data/format,
    /// 4 numerical failure, 1 anything unexpected.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Shape(_) => 2,
            Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numerical(_) | Error::DegenerateComponent(_) => 4,
            Error::Internal(_) => 1,
        }
    }
}
