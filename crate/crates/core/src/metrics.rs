//! Evaluation metrics.
//!
//! Binary metrics follow the usual confusion-matrix definitions with two
//! conventions: a 0/0 quotient is 0, and MCC is 0 whenever one of the four
//! marginal sums is 0. ROC-AUC counts tied (positive, negative) pairs as one
//! half.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::IssueKey;
use crate::labeling::Category;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} predictions vs {right} truths")]
    LengthMismatch { left: usize, right: usize },
    #[error("no examples to evaluate")]
    Empty,
    #[error("AUC undefined: truths contain a single class")]
    AucUndefined,
    #[error("score {0} is not a finite number")]
    NonFinite(f64),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub r#fn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, r#fn: fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.r#fn
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.r#fn += other.r#fn;
    }
}

fn check_lengths(left: usize, right: usize) -> Result<(), MetricsError> {
    if left != right {
        return Err(MetricsError::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn confusion(predictions: &[bool], truths: &[bool]) -> Result<ConfusionMatrix, MetricsError> {
    check_lengths(predictions.len(), truths.len())?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.r#fn += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> BasicMetrics {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.r#fn);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BasicMetrics {
        precision,
        recall,
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        f1,
    }
}

/// Matthews correlation coefficient.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.r#fn as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    // Pairwise square roots keep the product of four large sums in range.
    let den = (factors[0] * factors[1]).sqrt() * (factors[2] * factors[3]).sqrt();
    ((tp * tn - fp * fn_) / den).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are predicted positive. The first point uses
    /// +inf (serialized as null).
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

struct RocSweep {
    /// (threshold, true positives, false positives), cumulative.
    steps: Vec<(f64, u64, u64)>,
    positives: u64,
    negatives: u64,
}

fn sweep(scores: &[f64], truths: &[bool]) -> Result<RocSweep, MetricsError> {
    check_lengths(scores.len(), truths.len())?;
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(bad));
    }
    let positives = truths.iter().filter(|&&t| t).count() as u64;
    let negatives = truths.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut steps = vec![(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((threshold, tp, fp));
    }
    Ok(RocSweep {
        steps,
        positives,
        negatives,
    })
}

/// ROC curve swept over the distinct scores, highest first.
pub fn roc_curve(scores: &[f64], truths: &[bool]) -> Result<Vec<RocPoint>, MetricsError> {
    let s = sweep(scores, truths)?;
    Ok(s.steps
        .iter()
        .map(|&(threshold, tp, fp)| RocPoint {
            threshold,
            tpr: tp as f64 / s.positives as f64,
            fpr: fp as f64 / s.negatives as f64,
        })
        .collect())
}

/// Trapezoidal area under the threshold-swept ROC curve. Accumulated in
/// integers, so the only rounding is the final division.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<f64, MetricsError> {
    let s = sweep(scores, truths)?;
    let mut twice_area: u128 = 0;
    for pair in s.steps.windows(2) {
        let (_, tp0, fp0) = pair[0];
        let (_, tp1, fp1) = pair[1];
        twice_area += u128::from(fp1 - fp0) * u128::from(tp0 + tp1);
    }
    Ok(twice_area as f64 / (2.0 * s.positives as f64 * s.negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    /// None when the split holds a single class.
    pub auc: Option<f64>,
}

/// Metrics of one model on one split.
///
/// For multiclass models `confusion` holds the one-vs-rest cells summed over
/// classes, precision/recall/f1 are macro averages, accuracy is exact-match,
/// mcc is the multiclass generalisation and auc the macro one-vs-rest AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    pub support: BTreeMap<String, u64>,
}

pub fn evaluate_binary(
    model: &str,
    split: &str,
    scores: &[f64],
    truths: &[bool],
    threshold: f64,
) -> Result<EvalReport, MetricsError> {
    let predictions: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let cm = confusion(&predictions, truths)?;
    let basic = basic_metrics(&cm);
    let auc = match roc_auc(scores, truths) {
        Ok(a) => Some(a),
        Err(MetricsError::AucUndefined) => None,
        Err(e) => return Err(e),
    };
    let positives = truths.iter().filter(|&&t| t).count() as u64;
    Ok(EvalReport {
        model: model.to_string(),
        split: split.to_string(),
        confusion: cm,
        metrics: MetricSet {
            precision: basic.precision,
            recall: basic.recall,
            accuracy: basic.accuracy,
            f1: basic.f1,
            mcc: mcc(&cm),
            auc,
        },
        support: BTreeMap::from([
            ("true".to_string(), positives),
            ("false".to_string(), truths.len() as u64 - positives),
        ]),
    })
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Multiclass Matthews correlation from a K x K confusion table
/// (`table[truth][predicted]`); 0 when the denominator vanishes.
pub fn multiclass_mcc(table: &[Vec<u64>]) -> f64 {
    let k = table.len();
    let s: f64 = table.iter().flatten().sum::<u64>() as f64;
    let c: f64 = (0..k).map(|i| table[i][i]).sum::<u64>() as f64;
    let t: Vec<f64> = table.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..k).map(|j| table.iter().map(|row| row[j]).sum::<u64>() as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        ((c * s - pt) / den).clamp(-1.0, 1.0)
    }
}

pub fn evaluate_multiclass(
    model: &str,
    split: &str,
    probabilities: &[Vec<f64>],
    truths: &[usize],
    class_names: &[String],
) -> Result<EvalReport, MetricsError> {
    check_lengths(probabilities.len(), truths.len())?;
    let k = class_names.len();
    if let Some(&index) = truths.iter().find(|&&t| t >= k) {
        return Err(MetricsError::ClassOutOfRange { index, classes: k });
    }
    let predicted: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let mut table = vec![vec![0u64; k]; k];
    for (&t, &p) in truths.iter().zip(&predicted) {
        table[t][p] += 1;
    }
    let mut micro = ConfusionMatrix::default();
    let mut per_class = Vec::with_capacity(k);
    let mut aucs = Vec::new();
    for class in 0..k {
        let preds: Vec<bool> = predicted.iter().map(|&p| p == class).collect();
        let truth: Vec<bool> = truths.iter().map(|&t| t == class).collect();
        let cm = confusion(&preds, &truth)?;
        micro.add(&cm);
        per_class.push(basic_metrics(&cm));
        let scores: Vec<f64> = probabilities.iter().map(|p| p[class]).collect();
        match roc_auc(&scores, &truth) {
            Ok(a) => aucs.push(a),
            Err(MetricsError::AucUndefined) => {}
            Err(e) => return Err(e),
        }
    }
    let mean = |f: fn(&BasicMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let correct = (0..k).map(|i| table[i][i]).sum::<u64>();
    let support = class_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), table[i].iter().sum()))
        .collect();
    Ok(EvalReport {
        model: model.to_string(),
        split: split.to_string(),
        confusion: micro,
        metrics: MetricSet {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            accuracy: correct as f64 / truths.len() as f64,
            f1: mean(|m| m.f1),
            mcc: multiclass_mcc(&table),
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        },
        support,
    })
}

/// A ground-truth issue: carries a TD label and at least one type label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthIssue {
    pub key: IssueKey,
    pub categories: BTreeSet<Category>,
}

/// Per-issue outputs of one model on the ground-truth set. Issues missing
/// from a map count as not identified.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelHits {
    /// Predicted category of the 13-way model. An issue counts as identified
    /// when the prediction is any of its ground-truth categories.
    Multiclass(HashMap<IssueKey, Category>),
    /// Categories whose binary model fired.
    PerCategory(HashMap<IssueKey, BTreeSet<Category>>),
    /// Whether the TD model fired.
    TdOnly(HashMap<IssueKey, bool>),
}

impl ModelHits {
    fn identified(&self, issue: &GroundTruthIssue, row: Category) -> bool {
        match self {
            ModelHits::Multiclass(pred) => pred
                .get(&issue.key)
                .is_some_and(|c| issue.categories.contains(c)),
            ModelHits::PerCategory(fired) => {
                fired.get(&issue.key).is_some_and(|set| set.contains(&row))
            }
            ModelHits::TdOnly(fired) => fired.get(&issue.key).copied().unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedHits {
    pub model: String,
    pub hits: ModelHits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub category: Category,
    /// model name -> recall; None when support is 0.
    pub recall: BTreeMap<String, Option<f64>>,
    pub support: usize,
}

/// Recall per (category, model) over positive-only ground truth. One row per
/// category, in category order.
pub fn ground_truth_recall(models: &[NamedHits], ground_truth: &[GroundTruthIssue]) -> Vec<RecallRow> {
    Category::ALL
        .into_iter()
        .map(|category| {
            let members: Vec<&GroundTruthIssue> = ground_truth
                .iter()
                .filter(|g| g.categories.contains(&category))
                .collect();
            let support = members.len();
            let recall = models
                .iter()
                .map(|m| {
                    let value = (support > 0).then(|| {
                        let hits = members.iter().filter(|g| m.hits.identified(g, category)).count();
                        hits as f64 / support as f64
                    });
                    (m.model.clone(), value)
                })
                .collect();
            RecallRow {
                category,
                recall,
                support,
            }
        })
        .collect()
}

/// Format with 4 significant digits.
pub fn fmt_sig4(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.000".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_sig4).unwrap_or_else(|| "-".to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub json: String,
    pub text: String,
}

/// JSON array plus an aligned text table, both sorted by (model, split).
pub fn render_report(reports: &[EvalReport]) -> RenderedReport {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.model, &a.split).cmp(&(&b.model, &b.split)));

    let json = serde_json::to_string_pretty(&sorted).expect("reports serialize");
    let header = [
        "model", "split", "precision", "recall", "accuracy", "f1", "mcc", "auc", "tp", "fp", "tn", "fn",
    ];
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![
                r.model.clone(),
                r.split.clone(),
                fmt_sig4(m.precision),
                fmt_sig4(m.recall),
                fmt_sig4(m.accuracy),
                fmt_sig4(m.f1),
                fmt_sig4(m.mcc),
                fmt_opt(m.auc),
                r.confusion.tp.to_string(),
                r.confusion.fp.to_string(),
                r.confusion.tn.to_string(),
                r.confusion.r#fn.to_string(),
            ]
        })
        .collect();
    RenderedReport {
        json,
        text: align(&header, &rows, 2),
    }
}

/// Text rendering of the ground-truth recall table, with model columns in
/// the order given. An empty `columns` lists the models by name.
pub fn render_recall_table(rows: &[RecallRow], columns: &[String]) -> String {
    let models: Vec<String> = if columns.is_empty() {
        rows.first()
            .map(|r| r.recall.keys().cloned().collect())
            .unwrap_or_default()
    } else {
        columns.to_vec()
    };
    let mut header: Vec<&str> = vec!["category"];
    header.extend(models.iter().map(String::as_str));
    header.push("support");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![format!("{} Debt", r.category)];
            cells.extend(models.iter().map(|m| fmt_opt(r.recall.get(m).copied().flatten())));
            cells.push(r.support.to_string());
            cells
        })
        .collect();
    align(&header, &body, 1)
}

/// Left-align the first `left` columns, right-align the rest.
fn align(header: &[&str], rows: &[Vec<String>], left: usize) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < left { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}
