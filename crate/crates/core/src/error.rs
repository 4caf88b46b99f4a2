use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("expression error: {0}")]
    Expr(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("fiber Hessian is numerically singular at t={t}")]
    SingularMass { t: f64 },
    #[error("state norm {norm:e} exceeded the ceiling at t={t}")]
    BlowUp { t: f64, norm: f64 },
    #[error("step size underflow at t={t}")]
    StepUnderflow { t: f64 },
    #[error("reflected extension violates the flow: residual {residual:e} exceeds {limit:e}")]
    SymmetryViolation { residual: f64, limit: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("linear solve failed: {0}")]
    SolverFailure(String),
    #[error("P is singular at node {node}")]
    SingularP { node: usize },
    #[error("ill-conditioned crossing: {0}")]
    IllConditionedCrossing(String),
    #[error("modification parameters infeasible: {0}")]
    InfeasibleParams(String),
    #[error("loop speed {speed} is not below T={t}")]
    SpeedTooHigh { speed: f64, t: f64 },
    #[error("path endpoints do not match (gap {gap:e})")]
    EndpointMismatch { gap: f64 },
    #[error("points are {distance} apart, beyond the injectivity radius {radius}")]
    TooFar { distance: f64, radius: f64 },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
