//! Text classifiers: the scoring interface, the hashed bag-of-words
//! baseline, the exported-model adapter and the TD/type ensemble.

pub mod baseline;
mod ensemble;
#[cfg(feature = "onnx")]
pub mod export;
pub mod features;
mod predict;

use thiserror::Error;

pub use baseline::{
    train_baseline_binary, train_baseline_multiclass, BaselineModel, ModelFileError, TrainConfig, TrainError,
    TrainOutcome,
};
pub use ensemble::{ensemble_combine, Ensemble, EnsembleVerdict};
#[cfg(feature = "onnx")]
pub use export::{load_exported_model, ExportedModel, LoadError};
pub use predict::{predict_bundle, PredictionRow};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("model has no {wanted} head")]
    WrongHead { wanted: &'static str },
    #[error("inference failed: {0}")]
    Inference(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Head {
    Binary,
    /// Class names in output order.
    Multiclass(Vec<String>),
}

/// Uniform scoring interface. Binary models return a probability in [0, 1]
/// from `score`; multiclass models return a probability vector summing to 1
/// from `score_multi`. Calling the other method is an error.
pub trait TextClassifier: Send + Sync {
    fn head(&self) -> Head;
    fn score(&self, text: &str) -> Result<f64, ClassifierError>;
    fn score_multi(&self, text: &str) -> Result<Vec<f64>, ClassifierError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Score {
    Binary(f64),
    Multi(Vec<f64>),
}

/// Score with whichever head the model has.
pub fn score(model: &dyn TextClassifier, text: &str) -> Result<Score, ClassifierError> {
    match model.head() {
        Head::Binary => model.score(text).map(Score::Binary),
        Head::Multiclass(_) => model.score_multi(text).map(Score::Multi),
    }
}
