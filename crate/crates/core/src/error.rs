//! Crate-level error with the process exit code of each failure class.

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::DataError;
use crate::experiment::ExperimentError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::mv::MvError;
use crate::protocol::ProtocolError;
use crate::recon::ReconError;
use crate::train::TrainError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => EXIT_CONFIG,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Data(_) | Error::Io { .. } | Error::Recon(_) | Error::Checkpoint(_) | Error::Metric(_) => EXIT_DATA,
            Error::Protocol(e) => protocol_code(e),
            Error::Model(e) => model_code(e),
            Error::Train(e) => train_code(e),
            Error::Experiment(e) => match e {
                ExperimentError::Parse { .. } | ExperimentError::RateOffGrid { .. } | ExperimentError::NoSeeds => EXIT_CONFIG,
                ExperimentError::Protocol(p) => protocol_code(p),
                ExperimentError::Train(t) => train_code(t),
                ExperimentError::Metric(MetricError::TooFewRuns(_)) => EXIT_CONFIG,
                _ => EXIT_DATA,
            },
        }
    }
}

fn protocol_code(e: &ProtocolError) -> i32 {
    match e {
        ProtocolError::RateOffGrid { .. } => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) | ModelError::Mv(MvError::BadGeometry(_) | MvError::IndivisibleWidth { .. }) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::NonFiniteLoss { .. } => EXIT_NUMERIC,
        TrainError::Model(m) => model_code(m),
        _ => EXIT_DATA,
    }
}
