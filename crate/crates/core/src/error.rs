use thiserror::Error;

/// Errors produced by the bridgekit library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible quadrature: cell volumes {0} and {1} differ")]
    IncompatibleQuadrature(f64, f64),

    #[error("empty restriction: window carries zero mass")]
    EmptyRestriction,

    #[error("kernel positivity violated at ({row}, {col}): value {value}")]
    KernelPositivity { row: usize, col: usize, value: f64 },

    #[error("degenerate horizon: s = {s} must exceed t = {t}")]
    DegenerateHorizon { t: f64, s: f64 },

    #[error("solver did not converge in {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("newton iteration diverged: {0}")]
    NewtonDiverged(String),

    #[error("window {requested} is below n0 = {n0}")]
    BelowN0 { requested: usize, n0: usize },

    #[error("terminal marginal must be a density")]
    TerminalNotDensity,

    #[error("drift singular at terminal time (t = {0})")]
    DriftSingular(f64),

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),

    #[error("variant {index}: {source}")]
    Variant {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("flow problem infeasible: {0}")]
    Infeasible(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of a numerical procedure, as opposed to rejected input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotConverged { .. }
            | Error::NewtonDiverged(_)
            | Error::Infeasible(_)
            | Error::DegenerateRegression(_) => true,
            Error::Variant { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
