use thiserror::Error;

/// Errors produced anywhere in the estimation stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("duplicate unit id {0:?}")]
    DuplicateId(String),
    #[error("missing field {field:?}{}", row.as_ref().map(|r| format!(" on row {r}")).unwrap_or_default())]
    MissingField { field: String, row: Option<String> },
    #[error("{0} sample is empty")]
    EmptySample(&'static str),
    #[error("invalid value for {field:?}: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("complete or quasi-complete separation detected")]
    Separation,
    #[error("design matrix is singular or rank deficient")]
    SingularDesign,
    #[error("more parameters ({params}) than observations ({rows})")]
    Underdetermined { rows: usize, params: usize },
    #[error("no convergence after {iterations} iterations (max |score| = {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("response out of range (0,1) at position {index}: {value}")]
    ResponseOutOfRange { index: usize, value: f64 },
    #[error("MCMC chain degenerate: acceptance rate {0:.4}")]
    ChainDegenerate(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Jacobian is singular")]
    SingularJacobian,
    #[error("estimating equation has no root: sum of reference weights {weight_sum:.3} < n_B = {n_b}")]
    Infeasible { weight_sum: f64, n_b: usize },
    #[error("pseudo-inclusion probability out of (0,1) at S_B row {index}: {value}")]
    OutOfRange { index: usize, value: f64 },
    #[error("draw count mismatch: {left} vs {right}")]
    DrawCountMismatch { left: usize, right: usize },
    #[error("sum of weights is zero")]
    ZeroWeightSum,
    #[error("population size N is required for known-N normalization")]
    MissingN,
    #[error("PAPP route requires draws of the reference inclusion probabilities")]
    MissingPirDraws,

    #[error("matrix is singular")]
    SingularMatrix,
    #[error("at least two draws are required, got {0}")]
    TooFewDraws(usize),
    #[error("{failed} of {total} bootstrap replicates failed (first: {first})")]
    BootstrapFailed { failed: usize, total: usize, first: String },

    #[error("outcome has a single class")]
    SingleClass,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("cluster of size {size} cannot supply {requested} units")]
    ClusterTooSmall { size: usize, requested: usize },

    #[error("truth is zero; relative metrics undefined")]
    ZeroTruth,
    #[error("I/O: {0}")]
    Io(String),
    #[error("CSV parse error at row {row}: {message}")]
    CsvParse { row: usize, message: String },
}

impl Error {
    pub(crate) fn missing(field: &str) -> Self {
        Error::MissingField { field: field.to_string(), row: None }
    }

    pub(crate) fn missing_on(field: &str, row: &str) -> Self {
        Error::MissingField { field: field.to_string(), row: Some(row.to_string()) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
