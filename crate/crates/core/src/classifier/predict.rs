use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassifierError, Head, TextClassifier};
use crate::corpus::LabeledExample;

/// One scored example. For multiclass models `score` is the probability of
/// the predicted class and `probabilities` holds the full vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub repo: String,
    pub issue_id: u64,
    pub score: f64,
    pub predicted: String,
    pub truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
}

/// Score every example, in input order.
pub fn predict_bundle(
    model: &dyn TextClassifier,
    examples: &[LabeledExample],
    threshold: f64,
) -> Result<Vec<PredictionRow>, ClassifierError> {
    let head = model.head();
    examples
        .par_iter()
        .map(|e| {
            let (score, predicted, probabilities) = match &head {
                Head::Binary => {
                    let s = model.score(&e.text)?;
                    (s, (s >= threshold).to_string(), None)
                }
                Head::Multiclass(labels) => {
                    let p = model.score_multi(&e.text)?;
                    let (best, &score) = p
                        .iter()
                        .enumerate()
                        .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
                    (score, labels[best].clone(), Some(p))
                }
            };
            Ok(PredictionRow {
                repo: e.repo_name.clone(),
                issue_id: e.issue_id,
                score,
                predicted,
                truth: e.label.to_string(),
                probabilities,
            })
        })
        .collect()
}
