use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value {value} from {source_name} at {input}")]
    NonFinite {
        source_name: String,
        input: String,
        value: f64,
    },

    #[error("vector is not unit length (norm {0})")]
    NotUnit(f64),

    #[error("trace is only defined for square matrices ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("infeasible constraint assembly: {0}")]
    Infeasible(String),

    #[error("constraint residual {residual:e} exceeds tolerance {tolerance:e} ({what})")]
    Residual {
        what: String,
        residual: f64,
        tolerance: f64,
    },

    #[error("unsupported construction: {0}")]
    Unsupported(String),

    #[error("recursion depth {depth} exceeds cap {cap}")]
    DepthExceeded { depth: usize, cap: usize },

    #[error("cell {cell}: {message}")]
    AtCell { cell: usize, message: String },

    #[error("unknown density '{0}'")]
    UnknownDensity(String),

    #[error("serialization: {0}")]
    Serde(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
