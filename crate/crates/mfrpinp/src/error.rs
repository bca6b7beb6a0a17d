use std::fmt;

/// Failures surfaced by the front end, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration, arguments or input files (exit code 1).
    #[error("{0}")]
    Validation(String),
    /// Failures while computing or writing results (exit code 2).
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn validation(msg: impl fmt::Display) -> Self {
        Error::Validation(msg.to_string())
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Error::Runtime(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 1,
            Error::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<mfrpinp_core::learner::LearnerError> for Error {
    fn from(e: mfrpinp_core::learner::LearnerError) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<mfrpinp_core::sim::SimError> for Error {
    fn from(e: mfrpinp_core::sim::SimError) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<mfrpinp_core::ukf::UkfError> for Error {
    fn from(e: mfrpinp_core::ukf::UkfError) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<mfrpinp_core::np::NpError> for Error {
    fn from(e: mfrpinp_core::np::NpError) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<mfrpinp_core::conformal::ConformalError> for Error {
    fn from(e: mfrpinp_core::conformal::ConformalError) -> Self {
        Error::Runtime(e.to_string())
    }
}

impl From<mfrpinp_core::metrics::MetricsError> for Error {
    fn from(e: mfrpinp_core::metrics::MetricsError) -> Self {
        Error::Runtime(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
