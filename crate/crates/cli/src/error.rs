use std::fmt;

use gatectr::checkpoint::CheckpointError;
use gatectr::data::DataError;
use gatectr::gradcheck::GradCheckError;
use gatectr::metrics::MetricError;
use gatectr::model::ModelError;
use gatectr::tensor::TensorError;
use gatectr::train::TrainError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Every problem found in the configuration.
    Config(Vec<String>),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        CliError::Data(msg.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(errors) => {
                write!(f, "invalid configuration ({} problem{}):", errors.len(), if errors.len() == 1 { "" } else { "s" })?;
                for e in errors {
                    write!(f, "\n  - {e}")?;
                }
                Ok(())
            }
            CliError::Data(msg) => write!(f, "data error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidFraction(_) | DataError::InvalidBatchSize | DataError::TooManySignalFields { .. } => {
                CliError::Config(vec![e.to_string()])
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

fn tensor_error(e: TensorError) -> CliError {
    match e {
        TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        other => CliError::Numeric(format!("internal shape error: {other}")),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidSpec(_) | ModelError::ParseSpec { .. } => CliError::Config(vec![e.to_string()]),
            ModelError::Tensor(t) => tensor_error(t),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Loss(m) => m.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Metric(m) => m.into(),
            TrainError::EmptyTrainingSet => CliError::Data(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<GradCheckError> for CliError {
    fn from(e: GradCheckError) -> Self {
        match e {
            GradCheckError::Model(m) => m.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
