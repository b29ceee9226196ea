use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model parameter lies outside its admissible domain.
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// Malformed or inconsistent input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// A cumulant generating function was evaluated outside its convergence strip.
    #[error("argument {y} outside the m.g.f. convergence strip (must be < {bound})")]
    OutsideStrip { y: f64, bound: f64 },

    /// A requested size exceeds a configured cap.
    #[error("size limit exceeded: {0}")]
    Size(String),

    /// An iterative solver failed to converge.
    #[error("solver failed: {message}")]
    Solver { message: String, trace: Vec<f64> },

    /// Constrained optimization produced no feasible point.
    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn solver(message: impl Into<String>, trace: Vec<f64>) -> Self {
        Error::Solver {
            message: message.into(),
            trace,
        }
    }
}
