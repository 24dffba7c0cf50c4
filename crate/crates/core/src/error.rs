use crate::params::ParamError;
use crate::tensor::TensorError;

/// Errors raised while building or evaluating mappers, decoders and generators.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid model configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("non-finite value in {stage} at step {step}")]
    NonFinite { stage: &'static str, step: usize },
}

impl ModelError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Crate-level error, one variant per subsystem.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] crate::imle::TrainError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Config(#[from] crate::harness::ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] crate::harness::CheckpointError),
    #[error("training stopped at step {step} (last good state saved to {checkpoint})")]
    TrainAborted {
        step: u64,
        checkpoint: String,
        #[source]
        source: crate::imle::TrainError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
