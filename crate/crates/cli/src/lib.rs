//! Library side of the `kmarkov` binary; every subcommand is a plain
//! function so it can be driven from tests.

pub mod commands;
pub mod config;
pub mod manifest;

use kmarkov::estimator::EstimatorError;
use kmarkov::harness::HarnessError;
use kmarkov::simulator::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 0 success, 1 usage or config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig { .. } => CliError::Usage(e.to_string()),
            SimError::Dataset { .. } => CliError::Data(e.to_string()),
            SimError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        use EstimatorError::*;
        let msg = e.to_string();
        match e {
            InvalidSchedule(_) | InvalidLagRange { .. } | ScheduleMismatch { .. } | DegenerateHessian => {
                CliError::Usage(msg)
            }
            StateOutOfRange { .. }
            | CovariateMismatch { .. }
            | VersionMismatch { .. }
            | Checkpoint(_)
            | ShapeMismatch
            | Shape(_) => CliError::Data(msg),
            EmptyRange | LogUnavailable(_) | NotGenerator | NoUsableLag | Numeric(_) => CliError::Numeric(msg),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidSpec(m) => CliError::Usage(format!("invalid experiment: {m}")),
            HarnessError::Sim(e) => e.into(),
            HarnessError::Estimator(e) => e.into(),
        }
    }
}
