use thiserror::Error;

/// Errors raised anywhere in the synthesis / reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("assembly error at point {index} {coords:?}: {reason}")]
    Assembly {
        index: usize,
        coords: Vec<f64>,
        reason: String,
    },

    #[error("solver failed to converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("discrete operator is singular (pivot {pivot:.3e} at unknown {row})")]
    Singular { row: usize, pivot: f64 },

    #[error("H_1 falls below the non-vanishing threshold {threshold:.3e} at {} interior points (first: {:?})", points.len(), points.first())]
    NonVanishing { threshold: f64, points: Vec<usize> },

    #[error("{what} is degenerate at {} points (first: {:?})", points.len(), points.first())]
    Degenerate { what: String, points: Vec<usize> },

    #[error("too few functionals: {mode} reconstruction in dimension {dim} needs {required}, got {given}")]
    TooFewFunctionals {
        mode: &'static str,
        dim: usize,
        required: usize,
        given: usize,
    },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("reconstruction aborted: {masked:.1}% of valid points are masked")]
    Aborted { masked: f64 },

    #[error("modality resolution failed: {0}")]
    Resolution(String),

    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("evaluation error at {point:?}: {message}")]
    Eval { point: Vec<f64>, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Syntax { .. }
            | Error::Json(_)
            | Error::TooFewFunctionals { .. } => 2,
            Error::SolverFailure { .. } | Error::Singular { .. } | Error::Assembly { .. } => 3,
            Error::NonVanishing { .. }
            | Error::Degenerate { .. }
            | Error::Aborted { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
