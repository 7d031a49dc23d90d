//! Pipeline stages as reproducible runs.
//!
//! Each stage reads its inputs, writes its artifacts atomically under the
//! output directory and finishes with `<out>/<stage>.manifest.json`, which
//! records the effective configuration, the root seed, the rule-set version,
//! the SHA-256 of every input and output, and the stage's counts. Manifests
//! hold no timestamps, so repeating a run reproduces them byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::artifact::{sha256_file, write_atomic};
use crate::classifier::{
    predict_bundle, train_baseline_binary, train_baseline_multiclass, BaselineModel, ClassifierError, Ensemble,
    Head, ModelFileError, TextClassifier, TrainConfig, TrainError, DEFAULT_THRESHOLD,
};
use crate::corpus::{
    build_balanced_dataset, build_binary_bundle, build_multiclass_bundle, build_multiclass_dataset, deduplicate,
    purge_ground_truth, read_bundle, read_dataset, write_bundle, write_dataset, CurationError, DatasetBundle,
    ExampleLabel, LabeledExample, Split, SplitConfig, Task, TextCleaner, DEFAULT_MIN_LEN,
};
use crate::ingest::{self, IngestError, IssueKey};
use crate::labeling::{Category, Classified, LabelRuleSet};
use crate::metrics::{
    evaluate_binary, evaluate_multiclass, ground_truth_recall, render_recall_table, render_report, EvalReport,
    GroundTruthIssue, MetricsError, ModelHits, NamedHits,
};
use crate::seed;

pub const ISSUES_FILE: &str = "issues.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const BASELINE_SUFFIX: &str = ".baseline.bin";

/// Column names of the ground-truth recall table.
pub const COLUMN_MULTICLASS: &str = "MC";
pub const COLUMN_BINARY_TYPES: &str = "Binary types";
pub const COLUMN_TD_ONLY: &str = "TD only";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Mine,
    Curate,
    Split,
    TrainBaseline,
    Evaluate,
    Ensemble,
    GroundTruthEval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Mine,
        Stage::Curate,
        Stage::Split,
        Stage::TrainBaseline,
        Stage::Evaluate,
        Stage::Ensemble,
        Stage::GroundTruthEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mine => "mine",
            Stage::Curate => "curate",
            Stage::Split => "split",
            Stage::TrainBaseline => "train-baseline",
            Stage::Evaluate => "evaluate",
            Stage::Ensemble => "ensemble",
            Stage::GroundTruthEval => "ground-truth-eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error("training {task}: {cause}")]
    Train { task: String, cause: TrainError },
    #[error("{}: {cause}", path.display())]
    ModelFile { path: PathBuf, cause: ModelFileError },
    #[cfg(feature = "onnx")]
    #[error(transparent)]
    Export(#[from] crate::classifier::LoadError),
    #[error("exported models need the `onnx` feature: {}", path.display())]
    ExportUnsupported { path: PathBuf },
    #[error("model not found: {}", path.display())]
    MissingModel { path: PathBuf },
    #[error("{}: model has the wrong head for task {task}", path.display())]
    ModelHead { path: PathBuf, task: String },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{}:{line}: {cause}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        cause: serde_json::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl PipelineError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Ingest(_) => "ingest",
            PipelineError::Curation(_) => "curation",
            PipelineError::Train { .. } => "train",
            PipelineError::ModelFile { .. } => "model-file",
            #[cfg(feature = "onnx")]
            PipelineError::Export(_) => "export",
            PipelineError::ExportUnsupported { .. } => "export-unsupported",
            PipelineError::MissingModel { .. } => "missing-model",
            PipelineError::ModelHead { .. } => "model-head",
            PipelineError::Classifier(_) => "classifier",
            PipelineError::Metrics(_) => "metrics",
            PipelineError::Io { .. } => "io",
            PipelineError::Format { .. } => "format",
            PipelineError::InvalidArgument(_) => "invalid-argument",
        }
    }

    /// The file the error is about, when there is one.
    pub fn path(&self) -> Option<PathBuf> {
        match self {
            PipelineError::ModelFile { path, .. }
            | PipelineError::ExportUnsupported { path }
            | PipelineError::MissingModel { path }
            | PipelineError::ModelHead { path, .. }
            | PipelineError::Io { path, .. }
            | PipelineError::Format { path, .. } => Some(path.clone()),
            PipelineError::Ingest(IngestError::Open { path, .. }) => Some(path.clone()),
            PipelineError::Curation(CurationError::Io { path, .. } | CurationError::Format { path, .. }) => {
                Some(path.clone())
            }
            #[cfg(feature = "onnx")]
            PipelineError::Export(crate::classifier::LoadError::Missing { path, .. }) => Some(path.clone()),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |cause| PipelineError::Io {
        path: path.to_path_buf(),
        cause,
    }
}

/// Effective configuration of a run. The whole struct is recorded in the
/// manifest of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub ratio: f64,
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub ood_top_n: usize,
    pub min_len: usize,
    pub cutoff: Option<DateTime<Utc>>,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
    /// Restricts curate, split, train-baseline and evaluate to these tasks;
    /// empty means all.
    pub tasks: Vec<Task>,
    pub model_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            inputs: Vec::new(),
            out: PathBuf::from("out"),
            seed: 0,
            ratio: split.ratio,
            k: split.k,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            threshold: DEFAULT_THRESHOLD,
            ood_top_n: split.ood_top_n,
            min_len: DEFAULT_MIN_LEN,
            cutoff: None,
            since: None,
            until: None,
            tasks: Vec::new(),
            model_dir: None,
        }
    }
}

impl RunConfig {
    fn wants(&self, task: Task) -> bool {
        self.tasks.is_empty() || self.tasks.contains(&task)
    }

    fn split_config(&self) -> SplitConfig {
        SplitConfig {
            ratio: self.ratio,
            k: self.k,
            ood_top_n: self.ood_top_n,
            cutoff: self.cutoff,
            seed: self.seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            threshold: self.threshold,
            ..TrainConfig::default()
        }
    }

    fn model_dir(&self) -> Result<&Path, PipelineError> {
        self.model_dir
            .as_deref()
            .ok_or_else(|| PipelineError::InvalidArgument("--model-dir is required".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub tool_version: String,
    pub seed: u64,
    pub rule_set_version: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub counts: Value,
}

pub fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{stage}.manifest.json"))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|cause| PipelineError::Format {
        path: path.to_path_buf(),
        line: 0,
        cause,
    })
}

fn digest(path: &Path, shown: String) -> Result<FileDigest, PipelineError> {
    Ok(FileDigest {
        path: shown,
        sha256: sha256_file(path).map_err(io_err(path))?,
    })
}

/// Collects a stage's artifacts and writes its manifest last.
struct Run<'a> {
    stage: Stage,
    cfg: &'a RunConfig,
    inputs: Vec<PathBuf>,
    outputs: BTreeSet<PathBuf>,
}

impl<'a> Run<'a> {
    fn new(stage: Stage, cfg: &'a RunConfig) -> Result<Self, PipelineError> {
        fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
        Ok(Run {
            stage,
            cfg,
            inputs: Vec::new(),
            outputs: BTreeSet::new(),
        })
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, PipelineError> {
        let path = self.cfg.out.join(name);
        write_atomic(&path, bytes).map_err(io_err(&path))?;
        self.outputs.insert(path.clone());
        Ok(path)
    }

    fn record(&mut self, path: PathBuf) {
        self.outputs.insert(path);
    }

    fn finish(self, counts: Value) -> Result<RunManifest, PipelineError> {
        let mut inputs = Vec::with_capacity(self.inputs.len());
        let mut seen = HashSet::new();
        for p in &self.inputs {
            if seen.insert(p.clone()) {
                inputs.push(digest(p, p.display().to_string())?);
            }
        }
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(&self.cfg.out).unwrap_or(p);
                digest(p, rel.to_string_lossy().replace('\\', "/"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let manifest = RunManifest {
            stage: self.stage,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            rule_set_version: LabelRuleSet::default().version().to_string(),
            config: self.cfg.clone(),
            inputs,
            outputs,
            counts,
        };
        let path = manifest_path(&self.cfg.out, self.stage);
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        tracing::info!(stage = %self.stage, manifest = %path.display(), "stage finished");
        Ok(manifest)
    }
}

/// Files named by `inputs`; directories contribute their files with the
/// given extension(s), sorted by name.
pub fn expand_inputs(inputs: &[PathBuf], exts: &[&str]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(io_err(input))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    p.is_file() && !name.ends_with(".manifest.json") && exts.iter().any(|x| name.ends_with(x))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if input.is_file() {
            out.push(input.clone());
        } else {
            return Err(PipelineError::Io {
                path: input.clone(),
                cause: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            });
        }
    }
    if out.is_empty() {
        return Err(PipelineError::InvalidArgument("no input files".into()));
    }
    Ok(out)
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("rows serialize");
        out.push(b'\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|cause| PipelineError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                cause,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- mine

/// Archives to `issues.jsonl`: parse, keep the date window, one record per
/// issue.
pub fn mine(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let mut run = Run::new(Stage::Mine, cfg)?;
    let files = expand_inputs(&cfg.inputs, &[".json.gz", ".jsonl.gz", ".json", ".jsonl", ".gz"])?;
    for f in &files {
        run.input(f);
    }
    let (records, stats) = ingest::parse_files(&files)?;
    let parsed = records.len();
    let records = match (cfg.since, cfg.until) {
        (None, None) => records,
        (since, until) => ingest::filter_by_date(
            records,
            since.unwrap_or(DateTime::<Utc>::MIN_UTC),
            until.unwrap_or(DateTime::<Utc>::MAX_UTC),
        )?,
    };
    let in_window = records.len();
    let issues = ingest::collapse_issues(records);
    let mut bytes = Vec::new();
    ingest::write_records(&mut bytes, &issues)?;
    run.write(ISSUES_FILE, &bytes)?;
    run.finish(json!({
        "files": files.len(),
        "ingest": stats,
        "records_parsed": parsed,
        "records_in_window": in_window,
        "issues": issues.len(),
    }))
}

// ---------------------------------------------------------------- curate

/// A line of `ground_truth.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub repo: String,
    pub issue_id: u64,
    pub text: String,
    pub categories: BTreeSet<Category>,
    pub created_at: DateTime<Utc>,
}

impl GroundTruthRow {
    pub fn key(&self) -> IssueKey {
        IssueKey {
            repo: self.repo.clone(),
            issue_id: self.issue_id,
        }
    }
}

fn clean_all(items: Vec<Classified>, cleaner: &TextCleaner) -> (Vec<LabeledExample>, usize) {
    let cleaned: Vec<Option<LabeledExample>> = items
        .into_par_iter()
        .map(|c| {
            let text = cleaner.clean(&c.record.title, &c.record.body).ok()?;
            Some(LabeledExample {
                repo_name: c.record.repo_name,
                issue_id: c.record.issue_id,
                text,
                label: ExampleLabel::Binary(true),
                created_at: c.record.created_at,
                source_verdict: c.verdict,
            })
        })
        .collect();
    let rejected = cleaned.iter().filter(|c| c.is_none()).count();
    (cleaned.into_iter().flatten().collect(), rejected)
}

/// Issues to datasets: `td.jsonl`, one `<category>.jsonl` per category,
/// `multiclass.jsonl` and `ground_truth.jsonl`.
///
/// Binary datasets are balanced against the residual pool (issues matching
/// neither pattern). Ground-truth issues are written only to the
/// ground-truth file and purged from every dataset.
pub fn curate(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let mut run = Run::new(Stage::Curate, cfg)?;
    let files = expand_inputs(&cfg.inputs, &[".jsonl"])?;
    let mut records = Vec::new();
    for f in &files {
        run.input(f);
        let file = fs::File::open(f).map_err(io_err(f))?;
        records.extend(ingest::read_records(BufReader::new(file), &f.display().to_string())?);
    }
    let rules = LabelRuleSet::default();
    let cleaner = TextCleaner::new(cfg.min_len);
    let total = records.len();
    let partition = rules.partition_by_verdict(records);

    let mut counts = serde_json::Map::new();
    counts.insert("issues".into(), json!(total));

    // Ground truth.
    let gt_matched = partition.ground_truth.len();
    let (gt_clean, gt_short) = clean_all(partition.ground_truth, &cleaner);
    let gt_keys: HashSet<IssueKey> = gt_clean.iter().map(|e| e.key()).collect();
    let gt_rows: Vec<GroundTruthRow> = gt_clean
        .iter()
        .map(|e| GroundTruthRow {
            repo: e.repo_name.clone(),
            issue_id: e.issue_id,
            text: e.text.clone(),
            categories: e.source_verdict.categories.clone(),
            created_at: e.created_at,
        })
        .collect();
    run.write(GROUND_TRUTH_FILE, &jsonl(&gt_rows))?;
    counts.insert(
        "ground_truth".into(),
        json!({"matched": gt_matched, "too_short": gt_short, "kept": gt_rows.len()}),
    );

    let (residual, residual_short) = clean_all(partition.residual, &cleaner);
    let residual = purge_ground_truth(deduplicate(residual), &gt_keys);
    counts.insert(
        "residual".into(),
        json!({"too_short": residual_short, "pool": residual.len()}),
    );

    let mut lists: Vec<(Task, Vec<Classified>)> = vec![(Task::Td, partition.td_positives)];
    let mut per_category = partition.per_category;
    for c in Category::ALL {
        lists.push((Task::Category(c), per_category.remove(&c).unwrap_or_default()));
    }

    let mut task_counts = serde_json::Map::new();
    let mut skipped = serde_json::Map::new();
    let mut category_positives: BTreeMap<Category, Vec<LabeledExample>> = BTreeMap::new();
    for (task, items) in lists {
        let matched = items.len();
        let (clean, short) = clean_all(items, &cleaner);
        let positives = purge_ground_truth(deduplicate(clean), &gt_keys);
        let mut entry = json!({"matched": matched, "too_short": short, "positives": positives.len()});
        if let Task::Category(c) = task {
            category_positives.insert(c, positives.clone());
        }
        if !cfg.wants(task) {
            continue;
        }
        let texts: HashSet<&str> = positives.iter().map(|e| e.text.as_str()).collect();
        let negatives: Vec<LabeledExample> = residual
            .iter()
            .filter(|e| !texts.contains(e.text.as_str()))
            .cloned()
            .collect();
        match build_balanced_dataset(positives, negatives, seed::derive(cfg.seed, &format!("{task}/balance"))) {
            Ok(balanced) => {
                entry["rows"] = json!(balanced.examples.len());
                if let Some((available, kept)) = balanced.downsampled_positives {
                    entry["downsampled_positives"] = json!({"available": available, "kept": kept});
                }
                let path = cfg.out.join(format!("{task}.jsonl"));
                write_dataset(&path, &balanced.examples)?;
                run.record(path);
            }
            Err(e @ CurationError::EmptyPool { .. }) => {
                tracing::warn!(%task, error = %e, "dataset skipped");
                skipped.insert(task.to_string(), json!(e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        task_counts.insert(task.to_string(), entry);
    }

    if cfg.wants(Task::Multiclass) {
        match build_multiclass_dataset(&category_positives, seed::derive(cfg.seed, "multiclass/balance")) {
            Ok(examples) => {
                let path = cfg.out.join("multiclass.jsonl");
                write_dataset(&path, &examples)?;
                run.record(path);
                task_counts.insert("multiclass".into(), json!({"rows": examples.len()}));
            }
            Err(e @ CurationError::EmptyCategory(_)) => {
                tracing::warn!(error = %e, "multiclass dataset skipped");
                skipped.insert("multiclass".into(), json!(e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    counts.insert("tasks".into(), Value::Object(task_counts));
    counts.insert("skipped".into(), Value::Object(skipped));
    run.finish(Value::Object(counts))
}

// ---------------------------------------------------------------- split

fn task_of(path: &Path) -> Result<Task, PipelineError> {
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(".jsonl"))
        .unwrap_or_default();
    stem.parse()
        .map_err(|e: String| PipelineError::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Datasets to bundles: OOD carve-out, train/test split (ratio or temporal
/// cutoff) and folds. The task is read from each file name.
pub fn split(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let mut run = Run::new(Stage::Split, cfg)?;
    let files: Vec<PathBuf> = expand_inputs(&cfg.inputs, &[".jsonl"])?
        .into_iter()
        .filter(|p| p.file_name().is_none_or(|n| n != GROUND_TRUTH_FILE && n != ISSUES_FILE))
        .collect();
    let split_cfg = cfg.split_config();
    let rule_version = LabelRuleSet::default().version().to_string();
    let mut counts = serde_json::Map::new();
    for f in &files {
        let task = task_of(f)?;
        if !cfg.wants(task) {
            continue;
        }
        run.input(f);
        let dataset = read_dataset(f)?;
        let bundle = if task.is_binary() {
            build_binary_bundle(task, dataset, &split_cfg, &rule_version)?
        } else {
            build_multiclass_bundle(dataset, &split_cfg, &rule_version)?
        };
        let (rows, manifest) = write_bundle(&cfg.out, &bundle)?;
        run.record(rows);
        run.record(manifest);
        counts.insert(
            task.to_string(),
            json!({
                "train": bundle.train.len(),
                "test": bundle.test.len(),
                "ood": bundle.ood.len(),
                "withheld_repos": bundle.manifest.withheld_repos,
                "per_class": bundle.manifest.counts,
            }),
        );
    }
    run.finish(Value::Object(counts))
}

// ---------------------------------------------------------------- train

fn bundles(cfg: &RunConfig) -> Result<Vec<(PathBuf, DatasetBundle)>, PipelineError> {
    let files: Vec<PathBuf> = expand_inputs(&cfg.inputs, &[".jsonl"])?
        .into_iter()
        .filter(|p| p.file_name().is_none_or(|n| n != GROUND_TRUTH_FILE && n != ISSUES_FILE))
        .collect();
    let mut out = Vec::new();
    for f in files {
        let bundle = read_bundle(&f)?;
        if cfg.wants(bundle.task) {
            out.push((f, bundle));
        }
    }
    if out.is_empty() {
        return Err(PipelineError::InvalidArgument("no bundles selected".into()));
    }
    Ok(out)
}

/// Train one baseline per bundle: `<task>.baseline.bin` plus the per-fold
/// validation reports in `<task>.cv.json`.
pub fn train_baseline(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let mut run = Run::new(Stage::TrainBaseline, cfg)?;
    let bundles = bundles(cfg)?;
    let train_cfg = cfg.train_config();
    let trained: Vec<_> = bundles
        .par_iter()
        .map(|(_, b)| {
            let outcome = if b.task.is_binary() {
                train_baseline_binary(&b.train, &b.folds, &train_cfg)
            } else {
                train_baseline_multiclass(&b.train, &b.folds, &train_cfg)
            };
            outcome.map_err(|cause| PipelineError::Train {
                task: b.task.to_string(),
                cause,
            })
        })
        .collect();
    let mut counts = serde_json::Map::new();
    for ((path, bundle), outcome) in bundles.iter().zip(trained) {
        let outcome = outcome?;
        run.input(path);
        let task = bundle.task;
        let model_path = run.cfg.out.join(format!("{task}{BASELINE_SUFFIX}"));
        outcome.model.save(&model_path).map_err(|cause| PipelineError::ModelFile {
            path: model_path.clone(),
            cause,
        })?;
        run.record(model_path);
        let cv = json!({
            "task": task,
            "folds": outcome.fold_reports,
            "trace": outcome.model.trace,
        });
        let mut bytes = serde_json::to_vec_pretty(&cv).expect("cv serializes");
        bytes.push(b'\n');
        run.write(&format!("{task}.cv.json"), &bytes)?;
        let mean_mcc = if outcome.fold_reports.is_empty() {
            None
        } else {
            Some(outcome.fold_reports.iter().map(|r| r.metrics.mcc).sum::<f64>() / outcome.fold_reports.len() as f64)
        };
        counts.insert(
            task.to_string(),
            json!({"train": bundle.train.len(), "folds": outcome.fold_reports.len(), "mean_fold_mcc": mean_mcc}),
        );
    }
    run.finish(Value::Object(counts))
}

// ---------------------------------------------------------------- models

/// Load a model: a directory is an exported model, a file a baseline.
pub fn load_model(path: &Path) -> Result<Arc<dyn TextClassifier>, PipelineError> {
    if path.is_dir() {
        #[cfg(feature = "onnx")]
        {
            return Ok(Arc::new(crate::classifier::load_exported_model(path)?));
        }
        #[cfg(not(feature = "onnx"))]
        {
            return Err(PipelineError::ExportUnsupported { path: path.to_path_buf() });
        }
    }
    if !path.is_file() {
        return Err(PipelineError::MissingModel { path: path.to_path_buf() });
    }
    let model = BaselineModel::load(path).map_err(|cause| PipelineError::ModelFile {
        path: path.to_path_buf(),
        cause,
    })?;
    Ok(Arc::new(model))
}

/// Where the model for `task` lives under `dir`: `<task>.baseline.bin`, or
/// an export directory `<task>/`. None when neither exists.
pub fn find_model(dir: &Path, task: Task) -> Option<(PathBuf, &'static str)> {
    let baseline = dir.join(format!("{task}{BASELINE_SUFFIX}"));
    let export = dir.join(task.to_string());
    if baseline.is_file() {
        Some((baseline, "baseline"))
    } else if export.is_dir() {
        Some((export, "onnx"))
    } else {
        None
    }
}

fn require_model(dir: &Path, task: Task) -> Result<(PathBuf, &'static str, Arc<dyn TextClassifier>), PipelineError> {
    let (path, kind) = find_model(dir, task).ok_or_else(|| PipelineError::MissingModel {
        path: dir.join(format!("{task}{BASELINE_SUFFIX}")),
    })?;
    let model = load_model(&path)?;
    let head_ok = match (model.head(), task.is_binary()) {
        (Head::Binary, true) => true,
        (Head::Multiclass(labels), false) => labels.len() == Category::ALL.len(),
        _ => false,
    };
    if !head_ok {
        return Err(PipelineError::ModelHead {
            path,
            task: task.to_string(),
        });
    }
    Ok((path, kind, model))
}

fn optional_model(dir: &Path, task: Task) -> Result<Option<(PathBuf, Arc<dyn TextClassifier>)>, PipelineError> {
    match find_model(dir, task) {
        None => Ok(None),
        Some(_) => require_model(dir, task).map(|(p, _, m)| Some((p, m))),
    }
}

// ---------------------------------------------------------------- evaluate

fn evaluate_split(
    model_name: &str,
    model: &dyn TextClassifier,
    examples: &[LabeledExample],
    split: Split,
    threshold: f64,
) -> Result<(EvalReport, Vec<crate::classifier::PredictionRow>), PipelineError> {
    let rows = predict_bundle(model, examples, threshold)?;
    let report = match model.head() {
        Head::Binary => {
            let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
            let truths = examples
                .iter()
                .map(|e| {
                    e.label
                        .as_bool()
                        .ok_or_else(|| PipelineError::InvalidArgument(format!("{model_name}: non-binary label {}", e.label)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            evaluate_binary(model_name, &split.to_string(), &scores, &truths, threshold)?
        }
        Head::Multiclass(labels) => {
            let probabilities: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.probabilities.clone().unwrap_or_default())
                .collect();
            let truths = examples
                .iter()
                .map(|e| {
                    let name = e.label.to_string();
                    labels
                        .iter()
                        .position(|l| *l == name)
                        .ok_or_else(|| PipelineError::InvalidArgument(format!("{model_name}: label {name} not in model head")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            evaluate_multiclass(model_name, &split.to_string(), &probabilities, &truths, &labels)?
        }
    };
    Ok((report, rows))
}

/// Score each bundle's test split (and OOD split, when it has rows) with
/// the matching model from `--model-dir`. Writes `reports.json`,
/// `reports.txt` and `predictions/<task>.<split>.jsonl`.
pub fn evaluate(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let mut run = Run::new(Stage::Evaluate, cfg)?;
    let model_dir = cfg.model_dir()?.to_path_buf();
    let bundles = bundles(cfg)?;
    let mut reports = Vec::new();
    let mut counts = serde_json::Map::new();
    for (path, bundle) in &bundles {
        run.input(path);
        let (model_path, kind, model) = require_model(&model_dir, bundle.task)?;
        if model_path.is_file() {
            run.input(&model_path);
        }
        let name = format!("{kind}:{}", bundle.task);
        for split in [Split::Test, Split::Ood] {
            let examples = bundle.partition(split);
            if examples.is_empty() {
                continue;
            }
            let (report, rows) = evaluate_split(&name, model.as_ref(), examples, split, cfg.threshold)?;
            run.write(&format!("predictions/{}.{split}.jsonl", bundle.task), &jsonl(&rows))?;
            counts.insert(format!("{}.{split}", bundle.task), json!(examples.len()));
            reports.push(report);
        }
    }
    let rendered = render_report(&reports);
    run.write("reports.json", format!("{}\n", rendered.json).as_bytes())?;
    run.write("reports.txt", rendered.text.as_bytes())?;
    run.finish(Value::Object(counts))
}

// ---------------------------------------------------------------- ensemble

/// A line of the ensemble input: a text, optionally with its issue identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleInput {
    pub text: String,
    #[serde(default)]
    pub repo: Option<String>,
    #[serde(default)]
    pub issue_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issue_id: Option<u64>,
    #[serde(flatten)]
    pub verdict: crate::classifier::EnsembleVerdict,
}

/// Apply the TD model and the per-category models to texts; writes
/// `verdicts.jsonl`. The TD model is required; missing category models are
/// logged and leave their category untyped.
pub fn ensemble(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let mut run = Run::new(Stage::Ensemble, cfg)?;
    let model_dir = cfg.model_dir()?.to_path_buf();
    let (_, _, td) = require_model(&model_dir, Task::Td)?;
    let mut categories = BTreeMap::new();
    for c in Category::ALL {
        if let Some((_, m)) = optional_model(&model_dir, Task::Category(c))? {
            categories.insert(c, m);
        }
    }
    let ens = Ensemble::new(td, categories, cfg.threshold);
    let mut inputs: Vec<EnsembleInput> = Vec::new();
    for f in expand_inputs(&cfg.inputs, &[".jsonl"])? {
        run.input(&f);
        inputs.extend(read_jsonl::<EnsembleInput>(&f)?);
    }
    let rows = inputs
        .par_iter()
        .map(|i| {
            ens.verdict(&i.text).map(|verdict| EnsembleRow {
                repo: i.repo.clone(),
                issue_id: i.issue_id,
                verdict,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    run.write("verdicts.jsonl", &jsonl(&rows))?;
    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rows {
        for c in &r.verdict.typed_debt {
            *per_category.entry(c.to_string()).or_default() += 1;
        }
    }
    run.finish(json!({
        "texts": rows.len(),
        "td": rows.iter().filter(|r| r.verdict.is_td).count(),
        "typed": per_category,
        "missing_categories": ens.missing_categories(),
    }))
}

// ---------------------------------------------------------------- ground truth

/// Recall of the available models on the ground-truth file. Columns: the
/// multiclass model (`MC`), the per-category binary models (`Binary types`)
/// and the TD model (`TD only`); a column is present when its model(s) are.
/// A category whose binary model is missing scores no hits in that column.
pub fn ground_truth_eval(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let mut run = Run::new(Stage::GroundTruthEval, cfg)?;
    let model_dir = cfg.model_dir()?.to_path_buf();
    let mut rows: Vec<GroundTruthRow> = Vec::new();
    for f in expand_inputs(&cfg.inputs, &[".jsonl"])? {
        run.input(&f);
        rows.extend(read_jsonl::<GroundTruthRow>(&f)?);
    }
    let texts: Vec<&str> = rows.iter().map(|r| r.text.as_str()).collect();
    let mut columns: Vec<NamedHits> = Vec::new();
    let mut used: Vec<String> = Vec::new();

    if let Some((path, model)) = optional_model(&model_dir, Task::Multiclass)? {
        let Head::Multiclass(labels) = model.head() else { unreachable!("head checked on load") };
        let preds = texts
            .par_iter()
            .map(|t| model.score_multi(t))
            .collect::<Result<Vec<_>, _>>()?;
        let mut hits = HashMap::new();
        for (row, p) in rows.iter().zip(preds) {
            let best = argmax(&p);
            if let Ok(c) = labels[best].parse::<Category>() {
                hits.insert(row.key(), c);
            }
        }
        columns.push(NamedHits {
            model: COLUMN_MULTICLASS.into(),
            hits: ModelHits::Multiclass(hits),
        });
        used.push(path.display().to_string());
    }

    let mut fired: HashMap<IssueKey, BTreeSet<Category>> = HashMap::new();
    let mut any_category = false;
    for c in Category::ALL {
        let Some((path, model)) = optional_model(&model_dir, Task::Category(c))? else {
            continue;
        };
        any_category = true;
        used.push(path.display().to_string());
        let scores = texts
            .par_iter()
            .map(|t| model.score(t))
            .collect::<Result<Vec<_>, _>>()?;
        for (row, s) in rows.iter().zip(scores) {
            if s >= cfg.threshold {
                fired.entry(row.key()).or_default().insert(c);
            }
        }
    }
    if any_category {
        columns.push(NamedHits {
            model: COLUMN_BINARY_TYPES.into(),
            hits: ModelHits::PerCategory(fired),
        });
    }

    if let Some((path, model)) = optional_model(&model_dir, Task::Td)? {
        let scores = texts
            .par_iter()
            .map(|t| model.score(t))
            .collect::<Result<Vec<_>, _>>()?;
        let hits = rows
            .iter()
            .zip(scores)
            .map(|(r, s)| (r.key(), s >= cfg.threshold))
            .collect();
        columns.push(NamedHits {
            model: COLUMN_TD_ONLY.into(),
            hits: ModelHits::TdOnly(hits),
        });
        used.push(path.display().to_string());
    }
    if columns.is_empty() {
        return Err(PipelineError::MissingModel { path: model_dir });
    }

    let truth: Vec<GroundTruthIssue> = rows
        .iter()
        .map(|r| GroundTruthIssue {
            key: r.key(),
            categories: r.categories.clone(),
        })
        .collect();
    let table = ground_truth_recall(&columns, &truth);
    let mut json_bytes = serde_json::to_vec_pretty(&table).expect("table serializes");
    json_bytes.push(b'\n');
    run.write("recall.json", &json_bytes)?;
    let names: Vec<String> = columns.iter().map(|c| c.model.clone()).collect();
    run.write("recall.txt", render_recall_table(&table, &names).as_bytes())?;
    run.finish(json!({
        "issues": rows.len(),
        "columns": columns.iter().map(|c| c.model.clone()).collect::<Vec<_>>(),
        "models": used,
    }))
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

/// Run one stage.
pub fn run(stage: Stage, cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    match stage {
        Stage::Mine => mine(cfg),
        Stage::Curate => curate(cfg),
        Stage::Split => split(cfg),
        Stage::TrainBaseline => train_baseline(cfg),
        Stage::Evaluate => evaluate(cfg),
        Stage::Ensemble => ensemble(cfg),
        Stage::GroundTruthEval => ground_truth_eval(cfg),
    }
}
