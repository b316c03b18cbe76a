use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum SnmmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sampler error for individual {individual}: {message}")]
    Sampler { individual: String, message: String },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("transform error: b(phi; x) = 0 at individual {individual}, observation {observation}")]
    Transform { individual: usize, observation: usize },

    #[error("lasso solver did not reach KKT tolerance after {iterations} sweeps (worst residual {worst_residual:e})")]
    Convergence { iterations: usize, worst_residual: f64 },

    #[error("enumeration too large: {0}")]
    EnumerationTooLarge(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("run failed at iteration {iteration}, chain {chain}: {source}")]
    Chain {
        iteration: usize,
        chain: usize,
        #[source]
        source: Box<SnmmError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SnmmError {
    /// Short category label, used by the CLI to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            SnmmError::Config(_) => ErrorCategory::Config,
            SnmmError::Parse { .. } | SnmmError::Csv(_) => ErrorCategory::Parse,
            SnmmError::Convergence { .. } => ErrorCategory::Convergence,
            SnmmError::Integrity(_) | SnmmError::Data(_) => ErrorCategory::Data,
            SnmmError::Io(_) => ErrorCategory::Io,
            SnmmError::Chain { source, .. } => source.category(),
            _ => ErrorCategory::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Parse,
    Convergence,
    Data,
    Io,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Parse => 3,
            ErrorCategory::Convergence => 4,
            ErrorCategory::Data => 5,
            ErrorCategory::Io => 6,
            ErrorCategory::Numerical => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, SnmmError>;
