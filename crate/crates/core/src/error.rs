use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HcnnError>;

#[derive(Debug, Error)]
pub enum HcnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("stride must be positive (axis {axis})")]
    InvalidStride { axis: usize },

    #[error(
        "periodic convolution needs filter length {filter} <= axis length {len} (axis {axis})"
    )]
    PeriodicSupport {
        axis: usize,
        filter: usize,
        len: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate batch-norm slice: {0} samples per channel, need at least 2")]
    DegenerateSlice(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HcnnError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        HcnnError::Shape(msg.into())
    }
}
