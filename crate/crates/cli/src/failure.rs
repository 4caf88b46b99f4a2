//! Errors carrying the process exit code.

use std::fmt;

/// Exit codes are part of the command-line contract.
pub mod code {
    pub const OTHER: i32 = 1;
    pub const SCHEMA: i32 = 2;
    pub const NO_CONVERGENCE: i32 = 3;
    pub const IDENTITY: i32 = 4;
    pub const CERTIFICATE: i32 = 5;
    pub const ACTION_BOUND: i32 = 6;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(code::SCHEMA, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for Failure {}

impl From<brakekit::Error> for Failure {
    fn from(e: brakekit::Error) -> Self {
        use brakekit::Error as E;
        let c = match e {
            E::Invalid(_) | E::Expr(_) | E::GridMismatch(_) | E::PreconditionViolated(_) | E::Unsupported(_) => code::SCHEMA,
            E::NonConvergence { .. } => code::NO_CONVERGENCE,
            _ => code::OTHER,
        };
        Failure::new(c, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(code::OTHER, format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::schema(format!("json: {e}"))
    }
}
