use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{count} k-space location(s) outside the valid band [-{limit}, {limit}]")]
    OutOfBand { count: usize, limit: f64 },

    #[error("no acquired sample falls inside the reference band")]
    EmptyCoverage,

    #[error("numerical conditioning: {0}")]
    Conditioning(String),

    #[error("malformed KVOL data at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
