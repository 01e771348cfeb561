use thiserror::Error;

pub type Result<T> = std::result::Result<T, MarketError>;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The solver stopped without meeting its tolerance. The best iterate is
    /// kept so callers can inspect or reuse it.
    #[error("solver failure after {iterations} iterations: {message} (residual {residual:.3e})")]
    SolverFailure {
        message: String,
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("degenerate demand: {0}")]
    DegenerateDemand(String),

    #[error("best response diverged at iteration {iteration}: aggregate slope {slope:.6e}")]
    Divergence { iteration: usize, slope: f64 },

    #[error("best response did not converge in {iterations} iterations")]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
