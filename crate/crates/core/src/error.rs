use thiserror::Error;

use crate::config::ConfigError;
use crate::ctc::CtcError;
use crate::data::DataError;
use crate::evalbench::EvalError;
use crate::inference::InferenceError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::training::TrainingError;

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
