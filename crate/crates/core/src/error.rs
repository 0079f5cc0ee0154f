use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate gradient: zero L2 norm")]
    DegenerateGradient,

    #[error("degenerate response: zero L2 norm")]
    DegenerateResponse,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vectors vs {right} weights")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value produced")]
    NonFinite,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("too few clients: {0}")]
    TooFewClients(String),

    #[error("attack infeasible: {0}")]
    AttackInfeasible(String),

    #[error("LIE infeasible for n={n}, c={c}")]
    LieInfeasible { n: usize, c: usize },

    #[error("no adjustable coordinates")]
    NoAdjustableCoordinates,

    #[error("no trusted clients")]
    NoTrustedClients,

    #[error("no rows")]
    NoRows,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
