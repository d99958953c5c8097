use thiserror::Error;

/// Errors raised across the library. The CLI maps each variant onto an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric overflow in kernel term {term}: exponent {exponent:.3} exceeds {limit}")]
    NumericOverflow { term: usize, exponent: f64, limit: f64 },

    #[error("mean embedding not available in closed form: {0}")]
    UnsupportedEmbedding(String),

    #[error("insufficient data: {samples} samples cannot fill a window of depth {depth}")]
    InsufficientData { samples: usize, depth: usize },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("query is not in the behavior spanned by the data (relative residual {relative_residual:.3e})")]
    NotInBehavior { relative_residual: f64 },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("system generation failed after {attempts} attempts")]
    Generation { attempts: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
