//! Supervised learning pipeline for the 2D Euclidean travelling salesman
//! problem: dataset generation with exact optimal tours, a gated graph
//! convolutional network that predicts an edge-probability heat-map, and
//! greedy / beam-search decoders that turn heat-maps into valid tours,
//! plus classical construction heuristics and benchmarking tools.

pub use rayon;

pub mod autodiff;
pub mod data;
pub mod decode;
pub mod evalbench;
pub mod geom;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An instance exceeds a solver's size cap.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// Tensor operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called in the wrong state (e.g. backward twice).
    #[error("invalid state: {0}")]
    State(String),

    /// A file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Bad model or training configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
