use std::io;

use thiserror::Error;

/// Errors produced by the quantization, measurement and allocation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max |A - A^T| = {deviation:e})")]
    NotSymmetric { deviation: f64 },

    #[error("infeasible budget: at least {required} bits needed, limit is {limit} bits")]
    Infeasible { required: u64, limit: u64 },

    #[error("search space too large: {size} assignments exceeds the limit of {limit}")]
    TooLarge { size: f64, limit: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
