use thiserror::Error;

use crate::trace::ThroughputTrace;

#[derive(Debug, Error)]
pub enum Error {
    /// Correlation is undefined when a series has no variance; callers must
    /// see this rather than a silent 0.
    #[error("undefined correlation: {0} series has zero variance")]
    ZeroVariance(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no interval with a defined correlation")]
    NoValidInterval,
    #[error("no bucket with activity in either trace")]
    NoActivity,
    /// The circuit disappeared before the requested window completed; carries
    /// the samples recorded up to teardown.
    #[error("trace truncated at {:.3} s", partial.end())]
    TruncatedTrace { partial: ThroughputTrace },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
