use deformer::data::DataError;
use deformer::inference::InferenceError;
use deformer::model::ModelError;
use deformer::training::TrainError;

/// Failure of a CLI run, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("selftest failed: {0}")]
    Selftest(String),
}

impl CliError {
    pub fn config(key: &str, message: impl ToString) -> Self {
        CliError::Config { key: key.to_string(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Selftest(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Transformer(_) => CliError::config("model", e),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            _ if e.is_numerical() => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) => CliError::config("optimizer", e),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
