use thiserror::Error;

use topicmatch::checkpoint::CheckpointError;
use topicmatch::evaluator::EvalError;
use topicmatch::model::ModelError;
use topicmatch::synth_data::SynthError;
use topicmatch::trainer::TrainError;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidParams(_) | SynthError::EmptyDataset | SynthError::UnknownPair(_) | SynthError::NoImages(_) => {
                CliError::Config(e.to_string())
            }
            SynthError::DegeneratePose(_) | SynthError::Geometry(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigHashMismatch { .. } | CheckpointError::Model(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Io(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Geometry(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteParameter(_) | TrainError::Tensor(_) | TrainError::Loss(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Io(_) | TrainError::Json(_) => CliError::Io(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) | TrainError::NoPairs => CliError::Config(e.to_string()),
        }
    }
}
