use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ClassifierError, TextClassifier};
use crate::labeling::Category;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleVerdict {
    pub is_td: bool,
    pub typed_debt: BTreeSet<Category>,
    pub td_score: f64,
    pub category_scores: BTreeMap<Category, f64>,
}

/// An issue is typed debt of category `c` only when both the TD model and
/// the `c` model fire.
pub fn ensemble_combine(
    td_score: f64,
    category_scores: &BTreeMap<Category, f64>,
    threshold: f64,
) -> EnsembleVerdict {
    let is_td = td_score >= threshold;
    let typed_debt = category_scores
        .iter()
        .filter(|&(_, &s)| is_td && s >= threshold)
        .map(|(&c, _)| c)
        .collect();
    EnsembleVerdict {
        is_td,
        typed_debt,
        td_score,
        category_scores: category_scores.clone(),
    }
}

/// The TD model plus up to 13 per-category binary models.
#[derive(Clone)]
pub struct Ensemble {
    td: Arc<dyn TextClassifier>,
    categories: BTreeMap<Category, Arc<dyn TextClassifier>>,
    pub threshold: f64,
}

impl Ensemble {
    /// Missing category models are allowed: those categories never appear
    /// in `typed_debt`.
    pub fn new(
        td: Arc<dyn TextClassifier>,
        categories: BTreeMap<Category, Arc<dyn TextClassifier>>,
        threshold: f64,
    ) -> Self {
        let missing: Vec<&str> = Category::ALL
            .iter()
            .filter(|c| !categories.contains_key(c))
            .map(|c| c.name())
            .collect();
        if !missing.is_empty() {
            tracing::warn!(missing = ?missing, "ensemble has no model for some categories; their verdicts stay untyped");
        }
        Ensemble {
            td,
            categories,
            threshold,
        }
    }

    pub fn missing_categories(&self) -> Vec<Category> {
        Category::ALL
            .into_iter()
            .filter(|c| !self.categories.contains_key(c))
            .collect()
    }

    pub fn verdict(&self, text: &str) -> Result<EnsembleVerdict, ClassifierError> {
        let td = self.td.score(text)?;
        let scores = self
            .categories
            .iter()
            .map(|(&c, m)| m.score(text).map(|s| (c, s)))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        Ok(ensemble_combine(td, &scores, self.threshold))
    }
}
