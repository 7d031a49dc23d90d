//! Adapter for transformer classifiers exported as ONNX graphs.
//!
//! An export directory holds:
//!
//! - `model.onnx`: input `input_ids` (int64, `[1, L]`), optionally
//!   `attention_mask` (fed as ones); one output of shape `[1, 1]` (binary
//!   logit) or `[1, 13]` (category logits).
//! - `tokenizer.json`: a Hugging Face tokenizer definition.
//! - `parity.jsonl`: texts with the exporter's scores, `{"text", "score"}`
//!   for binary heads or `{"text", "scores"}` for multiclass heads.
//! - `card.json`: `{"task", "category", "labels", "exported_at", ...}`.
//!
//! Inputs are truncated to the first 512 tokens. Loading replays the parity
//! fixture and refuses the export if any score differs by more than 1e-3.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokenizers::{Tokenizer, TruncationParams};
use tract_onnx::prelude::*;

use super::{ClassifierError, Head, TextClassifier};
use crate::labeling::Category;

pub const MAX_TOKENS: usize = 512;
pub const PARITY_TOLERANCE: f64 = 1e-3;

pub const GRAPH_FILE: &str = "model.onnx";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const PARITY_FILE: &str = "parity.jsonl";
pub const CARD_FILE: &str = "card.json";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("export contract item `{item}` missing: {path}")]
    Missing { item: &'static str, path: PathBuf },
    #[error("export contract item `tokenizer` invalid ({path}): {cause}")]
    Tokenizer { path: PathBuf, cause: String },
    #[error("export contract item `graph` invalid ({path}): {cause}")]
    Graph { path: PathBuf, cause: String },
    #[error("export contract item `graph` output shape {shape} is not [1, 1] or [1, 13]")]
    Shape { shape: String },
    #[error("export contract item `card` invalid ({path}): {cause}")]
    Card { path: PathBuf, cause: String },
    #[error("export contract item `parity` invalid ({path}): {cause}")]
    ParityFixture { path: PathBuf, cause: String },
    #[error("export contract item `parity` failed: text {index} differs by {delta:.3e} (tolerance {tolerance:e})")]
    Parity { index: usize, delta: f64, tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportCard {
    pub task: String,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub exported_at: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct ParityLine {
    text: String,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    scores: Option<Vec<f64>>,
}

pub struct ExportedModel {
    plan: Arc<TypedSimplePlan>,
    tokenizer: Tokenizer,
    feeds_mask: bool,
    head: Head,
    pub card: ExportCard,
    /// Largest score difference seen on the parity fixture.
    pub parity_max_delta: f64,
}

impl std::fmt::Debug for ExportedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExportedModel")
            .field("head", &self.head)
            .field("card", &self.card)
            .field("parity_max_delta", &self.parity_max_delta)
            .finish()
    }
}

fn require(dir: &Path, file: &str, item: &'static str) -> Result<PathBuf, LoadError> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(LoadError::Missing { item, path })
    }
}

fn load_graph(path: &Path) -> Result<(Arc<TypedSimplePlan>, bool, usize), LoadError> {
    let graph_err = |cause: String| LoadError::Graph {
        path: path.to_path_buf(),
        cause,
    };
    let mut model = tract_onnx::onnx()
        .model_for_path(path)
        .map_err(|e| graph_err(format!("{e:#}")))?;
    let inputs = model.input_outlets().map_err(|e| graph_err(e.to_string()))?.to_vec();
    let names: Vec<String> = inputs.iter().map(|o| model.node(o.node).name.clone()).collect();
    let feeds_mask = match names.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["input_ids"] => false,
        ["input_ids", "attention_mask"] => true,
        [_] => false,
        other => return Err(graph_err(format!("unsupported inputs {other:?}; expected input_ids [+ attention_mask]"))),
    };
    let seq = model.sym("L");
    for i in 0..inputs.len() {
        model
            .set_input_fact(i, InferenceFact::dt_shape(i64::datum_type(), tvec!(1.to_dim(), seq.to_dim())))
            .map_err(|e| graph_err(e.to_string()))?;
    }
    let typed = model.into_typed().map_err(|e| graph_err(format!("{e:#}")))?;
    if typed.outputs.len() != 1 {
        return Err(graph_err(format!("{} outputs, expected 1", typed.outputs.len())));
    }
    let fact = typed.output_fact(0).map_err(|e| graph_err(e.to_string()))?;
    let dims: Vec<Option<i64>> = fact.shape.iter().map(|d| d.to_i64().ok()).collect();
    let width = match dims.as_slice() {
        [Some(1), Some(w)] if *w == 1 || *w == Category::ALL.len() as i64 => *w as usize,
        _ => {
            return Err(LoadError::Shape {
                shape: format!("{:?}", fact.shape),
            })
        }
    };
    let plan = typed
        .into_optimized()
        .and_then(|m| m.into_runnable())
        .map_err(|e| graph_err(format!("{e:#}")))?;
    Ok((plan, feeds_mask, width))
}

/// Load and verify an export directory.
pub fn load_exported_model(dir: &Path) -> Result<ExportedModel, LoadError> {
    if !dir.is_dir() {
        return Err(LoadError::Missing {
            item: "export directory",
            path: dir.to_path_buf(),
        });
    }
    let graph_path = require(dir, GRAPH_FILE, "graph")?;
    let tokenizer_path = require(dir, TOKENIZER_FILE, "tokenizer")?;
    let parity_path = require(dir, PARITY_FILE, "parity")?;
    let card_path = require(dir, CARD_FILE, "card")?;

    let card_err = |cause: String| LoadError::Card {
        path: card_path.clone(),
        cause,
    };
    let card_text = std::fs::read_to_string(&card_path).map_err(|e| card_err(e.to_string()))?;
    let card: ExportCard = serde_json::from_str(&card_text).map_err(|e| card_err(e.to_string()))?;

    let mut tokenizer = Tokenizer::from_file(&tokenizer_path).map_err(|e| LoadError::Tokenizer {
        path: tokenizer_path.clone(),
        cause: e.to_string(),
    })?;
    tokenizer.with_padding(None);
    tokenizer
        .with_truncation(Some(TruncationParams {
            max_length: MAX_TOKENS,
            ..TruncationParams::default()
        }))
        .map_err(|e| LoadError::Tokenizer {
            path: tokenizer_path.clone(),
            cause: e.to_string(),
        })?;

    let (plan, feeds_mask, width) = load_graph(&graph_path)?;
    let head = if width == 1 {
        Head::Binary
    } else {
        let labels = if card.labels.is_empty() {
            Category::ALL.iter().map(|c| c.name().to_string()).collect()
        } else {
            card.labels.clone()
        };
        if labels.len() != width {
            return Err(card_err(format!("{} labels for a {width}-logit head", labels.len())));
        }
        Head::Multiclass(labels)
    };

    let mut model = ExportedModel {
        plan,
        tokenizer,
        feeds_mask,
        head,
        card,
        parity_max_delta: 0.0,
    };
    model.parity_max_delta = model.check_parity(&parity_path)?;
    Ok(model)
}

impl ExportedModel {
    pub fn token_ids(&self, text: &str) -> Result<Vec<i64>, ClassifierError> {
        let encoding = self
            .tokenizer
            .encode(text, true)
            .map_err(|e| ClassifierError::Inference(format!("tokenizer: {e}")))?;
        let mut ids: Vec<i64> = encoding.get_ids().iter().map(|&i| i64::from(i)).collect();
        ids.truncate(MAX_TOKENS);
        Ok(ids)
    }

    fn logits(&self, text: &str) -> Result<Vec<f64>, ClassifierError> {
        let ids = self.token_ids(text)?;
        if ids.is_empty() {
            return Err(ClassifierError::Inference("text produced no tokens".into()));
        }
        let len = ids.len();
        let infer = |e: TractError| ClassifierError::Inference(format!("{e:#}"));
        let mut inputs: TVec<TValue> = tvec!(Tensor::from_shape(&[1, len], &ids).map_err(infer)?.into());
        if self.feeds_mask {
            inputs.push(Tensor::from_shape(&[1, len], &vec![1i64; len]).map_err(infer)?.into());
        }
        let outputs = self.plan.run(inputs).map_err(infer)?;
        let view = outputs[0].to_plain_array_view::<f32>().map_err(infer)?;
        Ok(view.iter().map(|&v| f64::from(v)).collect())
    }

    fn check_parity(&self, path: &Path) -> Result<f64, LoadError> {
        let fixture_err = |cause: String| LoadError::ParityFixture {
            path: path.to_path_buf(),
            cause,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let mut max_delta: f64 = 0.0;
        let mut count = 0;
        for (index, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: ParityLine =
                serde_json::from_str(line).map_err(|e| fixture_err(format!("line {}: {e}", index + 1)))?;
            let expected = match (&self.head, entry.score, entry.scores) {
                (Head::Binary, Some(s), _) => vec![s],
                (Head::Multiclass(_), _, Some(v)) => v,
                _ => return Err(fixture_err(format!("line {}: reference scores do not match the head", index + 1))),
            };
            let got = match &self.head {
                Head::Binary => self.score(&entry.text).map(|s| vec![s]),
                Head::Multiclass(_) => self.score_multi(&entry.text),
            }
            .map_err(|e| fixture_err(format!("line {}: {e}", index + 1)))?;
            if got.len() != expected.len() {
                return Err(fixture_err(format!(
                    "line {}: {} reference scores for {} outputs",
                    index + 1,
                    expected.len(),
                    got.len()
                )));
            }
            let delta = got
                .iter()
                .zip(&expected)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if !(delta <= PARITY_TOLERANCE) {
                return Err(LoadError::Parity {
                    index,
                    delta,
                    tolerance: PARITY_TOLERANCE,
                });
            }
            max_delta = max_delta.max(delta);
            count += 1;
        }
        if count == 0 {
            return Err(fixture_err("no parity entries".into()));
        }
        Ok(max_delta)
    }
}

impl TextClassifier for ExportedModel {
    fn head(&self) -> Head {
        self.head.clone()
    }

    fn score(&self, text: &str) -> Result<f64, ClassifierError> {
        if self.head != Head::Binary {
            return Err(ClassifierError::WrongHead { wanted: "binary" });
        }
        let z = self.logits(text)?[0];
        Ok(1.0 / (1.0 + (-z).exp()))
    }

    fn score_multi(&self, text: &str) -> Result<Vec<f64>, ClassifierError> {
        if self.head == Head::Binary {
            return Err(ClassifierError::WrongHead { wanted: "multiclass" });
        }
        let mut z = self.logits(text)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        z.iter_mut().for_each(|v| *v /= sum);
        Ok(z)
    }
}
