use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simplex exceeded its pivot cap of {0}")]
    IterationCapExceeded(usize),

    #[error("LP numerical failure: {0}")]
    LpNumericalFailure(String),

    #[error("polytope is unbounded")]
    Unbounded,

    #[error("polytope is empty")]
    EmptyPolytope,

    #[error("face enumeration is capped at dimension {cap}, got {dim}")]
    DimensionCapExceeded { dim: usize, cap: usize },

    #[error("state {0:?} lies outside every plant region")]
    OutOfDomain(Vec<f64>),

    #[error("degenerate origin: {0}")]
    DegenerateOrigin(String),

    #[error("cut direction vanishes at x = {0:?}")]
    ZeroCut(Vec<f64>),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("closed loop leaves the plant domain near x = {0:?}")]
    DomainGap(Vec<f64>),

    #[error("projection set is empty")]
    EmptyProjectionSet,

    #[error("local linear map is not Schur stable: spectral radius {radius}")]
    UnstableLinearization {
        radius: f64,
        eigenvalues: Vec<(f64, f64)>,
    },

    #[error("no feasible scaling found in [{lo}, {hi}]")]
    NoFeasibleGamma { lo: f64, hi: f64 },

    #[error("contours need a 2-D state space, got dimension {0}")]
    DimensionUnsupported(usize),

    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn dim_err(what: impl Into<String>) -> Error {
    Error::DimensionMismatch(what.into())
}
