//! IO companion for the refinement toolkit: dataset/config file formats,
//! checkpoints, and the command implementations behind the `ptrefine`
//! binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod formats;

/// Command-line failures, partitioned by exit code: schema violations exit
/// 2, numeric failures 3, I/O problems 4.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, err: std::io::Error) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }
}

impl From<ptrefine_core::trainer::TrainError> for CliError {
    fn from(err: ptrefine_core::trainer::TrainError) -> Self {
        use ptrefine_core::network::NetworkError;
        use ptrefine_core::trainer::TrainError;
        match &err {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(err.to_string()),
            TrainError::Network(NetworkError::NonFiniteGradient { .. }) => {
                CliError::Numeric(err.to_string())
            }
            _ => CliError::Schema(err.to_string()),
        }
    }
}

impl From<ptrefine_core::metrics::MetricsError> for CliError {
    fn from(err: ptrefine_core::metrics::MetricsError) -> Self {
        CliError::Schema(err.to_string())
    }
}

impl From<ptrefine_core::synthetic::SyntheticError> for CliError {
    fn from(err: ptrefine_core::synthetic::SyntheticError) -> Self {
        CliError::Schema(err.to_string())
    }
}

impl From<ptrefine_core::encoding::EncodingError> for CliError {
    fn from(err: ptrefine_core::encoding::EncodingError) -> Self {
        CliError::Schema(err.to_string())
    }
}

impl From<ptrefine_core::geometry::GeometryError> for CliError {
    fn from(err: ptrefine_core::geometry::GeometryError) -> Self {
        CliError::Schema(err.to_string())
    }
}
