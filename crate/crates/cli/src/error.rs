//! Error classification for exit codes.

use std::fmt;

use ibrec::checkpoint::CheckpointError;
use ibrec::config::ConfigError;
use ibrec::eval::EvalError;
use ibrec::graph::GraphError;
use ibrec::tensor::TensorError;
use ibrec::trainer::TrainError;

/// A command failure carrying its exit-code class: input and configuration
/// problems exit with 2, numeric failures with 3.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn input(detail: impl fmt::Display) -> Self {
        CliError::Input(detail.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(detail) | CliError::Numeric(detail) => f.write_str(detail),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(err: GraphError) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(err: CheckpointError) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(err: TensorError) -> Self {
        CliError::Numeric(err.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Config(_) | TrainError::Data(_) => CliError::Input(err.to_string()),
            TrainError::Epoch { .. } => CliError::Numeric(err.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> Self {
        match err {
            EvalError::Config(_) | EvalError::Contract(_) => CliError::Input(err.to_string()),
            EvalError::Train(inner) => inner.into(),
            EvalError::Graph(inner) => inner.into(),
            EvalError::Tensor(inner) => inner.into(),
        }
    }
}
