//! Hashed bag-of-words logistic and softmax regression, trained by
//! full-batch gradient descent from zero weights.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::features::{featurize, SparseVec, FEATURE_DIM};
use super::{ClassifierError, Head, TextClassifier};
use crate::artifact::write_atomic;
use crate::corpus::{ExampleLabel, LabeledExample};
use crate::labeling::Category;
use crate::metrics::{evaluate_binary, evaluate_multiclass, EvalReport, MetricsError};

/// Largest learning rate accepted for binary training.
pub const MAX_BINARY_LEARNING_RATE: f64 = 2.0;
/// Largest learning rate accepted for multiclass training.
pub const MAX_MULTICLASS_LEARNING_RATE: f64 = 1.0;

const MAGIC: &[u8; 4] = b"DLBM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite training loss at epoch {epoch} ({})", fold_name(*.fold))]
    NonFiniteLoss { fold: Option<usize>, epoch: usize },
    #[error("invalid training argument: {0}")]
    InvalidArgument(String),
    #[error("class `{0}` has no training examples")]
    MissingClass(String),
    #[error("example {index} has label `{label}`, expected {expected}")]
    WrongLabel {
        index: usize,
        label: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn fold_name(fold: Option<usize>) -> String {
    match fold {
        Some(f) => format!("fold {f}"),
        None => "final model".to_string(),
    }
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },
    #[error("not a baseline model file (bad magic)")]
    BadMagic,
    #[error("unsupported baseline model format version {0}")]
    UnsupportedVersion(u32),
    #[error("baseline model file is truncated")]
    Truncated,
    #[error("baseline model file is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Recorded with the model. Weights start at zero, so training itself
    /// is deterministic without it.
    pub seed: u64,
    pub dim: usize,
    /// Decision threshold for the binary validation reports.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.5,
            seed: 0,
            dim: FEATURE_DIM,
            threshold: super::DEFAULT_THRESHOLD,
        }
    }
}

/// A trained baseline. Binary models have one output; multiclass models one
/// output per label.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub dim: usize,
    pub binary: bool,
    /// ["false", "true"] for binary models, class names otherwise.
    pub labels: Vec<String>,
    /// Output-major: `weights[k * dim + j]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Per label, in `labels` order.
    pub class_weights: Vec<f64>,
    /// Weighted training loss at initialisation, then after each epoch.
    pub trace: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BaselineModel,
    /// One validation report per fold, split named `fold-<i>`.
    pub fold_reports: Vec<EvalReport>,
}

/// Inverse-frequency class weights `n / (K * count_c)`.
pub fn class_weights(counts: &[usize], names: &[String]) -> Result<Vec<f64>, TrainError> {
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    counts
        .iter()
        .zip(names)
        .map(|(&c, name)| {
            if c == 0 {
                Err(TrainError::MissingClass(name.clone()))
            } else {
                Ok(n as f64 / (k * c as f64))
            }
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Weighted mean logistic loss and its gradient with respect to the weights
/// and the bias. `weights` is dense over the feature dimension.
pub fn binary_loss_and_gradient(
    weights: &[f64],
    bias: f64,
    x: &[SparseVec],
    y: &[bool],
    sample_weights: &[f64],
) -> (f64, Vec<f64>, f64) {
    let total: f64 = sample_weights.iter().sum();
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for ((xi, &yi), &wi) in x.iter().zip(y).zip(sample_weights) {
        let z = xi.dot(weights) + bias;
        let t = if yi { 1.0 } else { 0.0 };
        loss += wi * (softplus(z) - t * z);
        let r = wi * (sigmoid(z) - t);
        for (&j, &v) in xi.indices.iter().zip(&xi.values) {
            grad[j as usize] += r * v;
        }
        grad_b += r;
    }
    grad.iter_mut().for_each(|g| *g /= total);
    (loss / total, grad, grad_b / total)
}

/// Weighted mean softmax cross-entropy and its gradient. `weights` is
/// output-major (`k * dim + j`).
pub fn multiclass_loss_and_gradient(
    weights: &[f64],
    bias: &[f64],
    x: &[SparseVec],
    y: &[usize],
    sample_weights: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let k = bias.len();
    let dim = weights.len() / k;
    let total: f64 = sample_weights.iter().sum();
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = vec![0.0; k];
    let mut loss = 0.0;
    let mut p = vec![0.0; k];
    for ((xi, &yi), &wi) in x.iter().zip(y).zip(sample_weights) {
        for c in 0..k {
            p[c] = xi.dot(&weights[c * dim..(c + 1) * dim]) + bias[c];
        }
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += wi * (log_sum - p[yi]);
        softmax_in_place(&mut p);
        for c in 0..k {
            let r = wi * (p[c] - if c == yi { 1.0 } else { 0.0 });
            let row = &mut grad[c * dim..(c + 1) * dim];
            for (&j, &v) in xi.indices.iter().zip(&xi.values) {
                row[j as usize] += r * v;
            }
            grad_b[c] += r;
        }
    }
    grad.iter_mut().for_each(|g| *g /= total);
    grad_b.iter_mut().for_each(|g| *g /= total);
    (loss / total, grad, grad_b)
}

enum Targets<'a> {
    Binary(&'a [bool]),
    Multi(&'a [usize], usize),
}

impl Targets<'_> {
    fn outputs(&self) -> usize {
        match self {
            Targets::Binary(_) => 1,
            Targets::Multi(_, k) => *k,
        }
    }

    fn class_of(&self, i: usize) -> usize {
        match self {
            Targets::Binary(y) => usize::from(y[i]),
            Targets::Multi(y, _) => y[i],
        }
    }

    fn subset(&self, rows: &[usize]) -> Subset {
        match self {
            Targets::Binary(y) => Subset::Binary(rows.iter().map(|&i| y[i]).collect()),
            Targets::Multi(y, _) => Subset::Multi(rows.iter().map(|&i| y[i]).collect()),
        }
    }
}

enum Subset {
    Binary(Vec<bool>),
    Multi(Vec<usize>),
}

impl Subset {
    fn loss_and_gradient(&self, w: &[f64], b: &[f64], x: &[SparseVec], sw: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        match self {
            Subset::Binary(y) => {
                let (l, g, gb) = binary_loss_and_gradient(w, b[0], x, y, sw);
                (l, g, vec![gb])
            }
            Subset::Multi(y) => multiclass_loss_and_gradient(w, b, x, y, sw),
        }
    }
}

struct Fit {
    weights: Vec<f64>,
    bias: Vec<f64>,
    trace: Vec<f64>,
}

fn gradient_descent(
    x: &[SparseVec],
    targets: &Targets<'_>,
    rows: &[usize],
    sample_weights: &[f64],
    cfg: &TrainConfig,
    fold: Option<usize>,
) -> Result<Fit, TrainError> {
    let k = targets.outputs();
    let xs: Vec<SparseVec> = rows.iter().map(|&i| x[i].clone()).collect();
    let ws: Vec<f64> = rows.iter().map(|&i| sample_weights[i]).collect();
    let ys = targets.subset(rows);
    let mut weights = vec![0.0; cfg.dim * k];
    let mut bias = vec![0.0; k];
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grad, grad_b) = ys.loss_and_gradient(&weights, &bias, &xs, &ws);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { fold, epoch });
        }
        trace.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
        for (b, g) in bias.iter_mut().zip(&grad_b) {
            *b -= cfg.learning_rate * g;
        }
    }
    Ok(Fit { weights, bias, trace })
}

fn check_config(cfg: &TrainConfig, max_lr: f64) -> Result<(), TrainError> {
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate <= max_lr) {
        return Err(TrainError::InvalidArgument(format!(
            "learning rate must be in (0, {max_lr}], got {}",
            cfg.learning_rate
        )));
    }
    if cfg.dim == 0 || cfg.dim > u32::MAX as usize {
        return Err(TrainError::InvalidArgument(format!("feature dimension {} out of range", cfg.dim)));
    }
    Ok(())
}

fn check_folds(n: usize, folds: &[usize]) -> Result<usize, TrainError> {
    if folds.len() != n {
        return Err(TrainError::InvalidArgument(format!(
            "fold map has {} entries for {n} examples",
            folds.len()
        )));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(TrainError::InvalidArgument("fold map needs at least 2 folds".into()));
    }
    if let Some(f) = (0..k).find(|f| !folds.contains(f)) {
        return Err(TrainError::InvalidArgument(format!("fold {f} is empty")));
    }
    Ok(k)
}

fn train(
    texts: &[&str],
    targets: Targets<'_>,
    labels: Vec<String>,
    folds: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let binary = matches!(targets, Targets::Binary(_));
    check_config(cfg, if binary { MAX_BINARY_LEARNING_RATE } else { MAX_MULTICLASS_LEARNING_RATE })?;
    let k = check_folds(texts.len(), folds)?;

    let mut counts = vec![0usize; labels.len()];
    for i in 0..texts.len() {
        counts[targets.class_of(i)] += 1;
    }
    let cw = class_weights(&counts, &labels)?;
    let sample_weights: Vec<f64> = (0..texts.len()).map(|i| cw[targets.class_of(i)]).collect();
    let x: Vec<SparseVec> = texts.iter().map(|t| featurize(t, cfg.dim)).collect();

    let mut fold_reports = Vec::with_capacity(k);
    for fold in 0..k {
        let (train_rows, val_rows): (Vec<usize>, Vec<usize>) = (0..texts.len()).partition(|&i| folds[i] != fold);
        let fit = gradient_descent(&x, &targets, &train_rows, &sample_weights, cfg, Some(fold))?;
        let model = BaselineModel {
            dim: cfg.dim,
            binary,
            labels: labels.clone(),
            weights: fit.weights,
            bias: fit.bias,
            class_weights: cw.clone(),
            trace: fit.trace,
            seed: cfg.seed,
        };
        let split = format!("fold-{fold}");
        let report = match &targets {
            Targets::Binary(y) => {
                let scores: Vec<f64> = val_rows.iter().map(|&i| model.score_features(&x[i])).collect();
                let truths: Vec<bool> = val_rows.iter().map(|&i| y[i]).collect();
                evaluate_binary("baseline", &split, &scores, &truths, cfg.threshold)?
            }
            Targets::Multi(y, _) => {
                let probs: Vec<Vec<f64>> = val_rows.iter().map(|&i| model.probabilities(&x[i])).collect();
                let truths: Vec<usize> = val_rows.iter().map(|&i| y[i]).collect();
                evaluate_multiclass("baseline", &split, &probs, &truths, &labels)?
            }
        };
        fold_reports.push(report);
    }

    let all: Vec<usize> = (0..texts.len()).collect();
    let fit = gradient_descent(&x, &targets, &all, &sample_weights, cfg, None)?;
    Ok(TrainOutcome {
        model: BaselineModel {
            dim: cfg.dim,
            binary,
            labels,
            weights: fit.weights,
            bias: fit.bias,
            class_weights: cw,
            trace: fit.trace,
            seed: cfg.seed,
        },
        fold_reports,
    })
}

/// Logistic regression on raw texts with boolean targets.
pub fn train_logistic(texts: &[&str], y: &[bool], folds: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if texts.len() != y.len() {
        return Err(TrainError::InvalidArgument(format!("{} texts for {} labels", texts.len(), y.len())));
    }
    train(texts, Targets::Binary(y), vec!["false".into(), "true".into()], folds, cfg)
}

/// Softmax regression over an arbitrary class list. Every class needs at
/// least one example.
pub fn train_softmax(
    texts: &[&str],
    y: &[usize],
    class_names: &[String],
    folds: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if texts.len() != y.len() {
        return Err(TrainError::InvalidArgument(format!("{} texts for {} labels", texts.len(), y.len())));
    }
    let k = class_names.len();
    if k < 2 {
        return Err(TrainError::InvalidArgument("softmax needs at least 2 classes".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(TrainError::InvalidArgument(format!("class index {bad} out of range for {k} classes")));
    }
    train(texts, Targets::Multi(y, k), class_names.to_vec(), folds, cfg)
}

/// Binary baseline with cross-validation over `folds`, then a final model on
/// every example.
pub fn train_baseline_binary(
    train: &[LabeledExample],
    folds: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let y = train
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.label.as_bool().ok_or_else(|| TrainError::WrongLabel {
                index: i,
                label: e.label.to_string(),
                expected: "a boolean",
            })
        })
        .collect::<Result<Vec<bool>, _>>()?;
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    train_logistic(&texts, &y, folds, cfg)
}

/// 13-way baseline with class-weighted loss. Every category must be present.
pub fn train_baseline_multiclass(
    train: &[LabeledExample],
    folds: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let y = train
        .iter()
        .enumerate()
        .map(|(i, e)| match e.label {
            ExampleLabel::Category(c) => Ok(c.index()),
            _ => Err(TrainError::WrongLabel {
                index: i,
                label: e.label.to_string(),
                expected: "a category",
            }),
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let names: Vec<String> = Category::ALL.iter().map(|c| c.name().to_string()).collect();
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    train_softmax(&texts, &y, &names, folds, cfg)
}

impl BaselineModel {
    /// An untrained binary model: every score is 0.5.
    pub fn zeros_binary(dim: usize) -> Self {
        BaselineModel {
            dim,
            binary: true,
            labels: vec!["false".into(), "true".into()],
            weights: vec![0.0; dim],
            bias: vec![0.0],
            class_weights: vec![1.0, 1.0],
            trace: Vec::new(),
            seed: 0,
        }
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &SparseVec) -> Vec<f64> {
        (0..self.outputs())
            .map(|k| x.dot(&self.weights[k * self.dim..(k + 1) * self.dim]) + self.bias[k])
            .collect()
    }

    fn score_features(&self, x: &SparseVec) -> f64 {
        sigmoid(self.logits(x)[0])
    }

    fn probabilities(&self, x: &SparseVec) -> Vec<f64> {
        let mut z = self.logits(x);
        softmax_in_place(&mut z);
        z
    }

    pub fn validate(&self) -> Result<(), ModelFileError> {
        let corrupt = |m: String| Err(ModelFileError::Corrupt(m));
        let k = self.outputs();
        if self.dim == 0 {
            return corrupt("zero feature dimension".into());
        }
        if self.binary && (k != 1 || self.labels.len() != 2) {
            return corrupt("binary model must have one output and two labels".into());
        }
        if !self.binary && (k < 2 || self.labels.len() != k) {
            return corrupt(format!("multiclass model has {k} outputs and {} labels", self.labels.len()));
        }
        if self.weights.len() != self.dim * k {
            return corrupt(format!("{} weights for dimension {} x {k}", self.weights.len(), self.dim));
        }
        if self.class_weights.len() != self.labels.len() || !self.class_weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return corrupt("class weights must be finite and positive, one per label".into());
        }
        if !self.weights.iter().chain(&self.bias).all(|w| w.is_finite()) {
            return corrupt("non-finite parameter".into());
        }
        Ok(())
    }

    /// Versioned binary serialisation. Weights are stored sparsely; a SHA-256
    /// of the preceding bytes closes the file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(u8::from(self.binary));
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        for label in &self.labels {
            out.extend_from_slice(&(label.len() as u32).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
        }
        for list in [&self.bias, &self.class_weights, &self.trace] {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for v in list.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let nonzero: Vec<(usize, f64)> = self.weights.iter().copied().enumerate().filter(|&(_, w)| w != 0.0).collect();
        out.extend_from_slice(&(nonzero.len() as u64).to_le_bytes());
        for (i, w) in nonzero {
            out.extend_from_slice(&(i as u64).to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFileError> {
        if bytes.len() < 4 {
            return Err(ModelFileError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(ModelFileError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelFileError::UnsupportedVersion(version));
        }
        let binary = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(ModelFileError::Corrupt(format!("bad head flag {other}"))),
        };
        let dim = r.u64()? as usize;
        let seed = r.u64()?;
        let n_labels = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n_labels.min(1024));
        for _ in 0..n_labels {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            labels.push(
                String::from_utf8(raw.to_vec()).map_err(|_| ModelFileError::Corrupt("label is not UTF-8".into()))?,
            );
        }
        let mut lists: [Vec<f64>; 3] = Default::default();
        for list in lists.iter_mut() {
            let len = r.u32()? as usize;
            for _ in 0..len {
                list.push(r.f64()?);
            }
        }
        let [bias, class_weights, trace] = lists;
        let outputs = bias.len();
        let total = dim
            .checked_mul(outputs)
            .filter(|&t| t <= (1 << 32))
            .ok_or_else(|| ModelFileError::Corrupt("weight matrix too large".into()))?;
        let mut weights = vec![0.0; total];
        let nnz = r.u64()?;
        for _ in 0..nnz {
            let i = r.u64()? as usize;
            let w = r.f64()?;
            *weights
                .get_mut(i)
                .ok_or_else(|| ModelFileError::Corrupt(format!("weight index {i} out of range")))? = w;
        }
        let body_end = r.pos;
        let digest = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(ModelFileError::Corrupt("trailing bytes".into()));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(ModelFileError::Corrupt("checksum mismatch".into()));
        }
        let model = BaselineModel {
            dim,
            binary,
            labels,
            weights,
            bias,
            class_weights,
            trace,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        write_atomic(path, &self.to_bytes()).map_err(|cause| ModelFileError::Io {
            path: path.display().to_string(),
            cause,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        let bytes = std::fs::read(path).map_err(|cause| ModelFileError::Io {
            path: path.display().to_string(),
            cause,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ModelFileError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelFileError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl TextClassifier for BaselineModel {
    fn head(&self) -> Head {
        if self.binary {
            Head::Binary
        } else {
            Head::Multiclass(self.labels.clone())
        }
    }

    fn score(&self, text: &str) -> Result<f64, ClassifierError> {
        if !self.binary {
            return Err(ClassifierError::WrongHead { wanted: "binary" });
        }
        Ok(self.score_features(&featurize(text, self.dim)))
    }

    fn score_multi(&self, text: &str) -> Result<Vec<f64>, ClassifierError> {
        if self.binary {
            return Err(ClassifierError::WrongHead { wanted: "multiclass" });
        }
        Ok(self.probabilities(&featurize(text, self.dim)))
    }
}
