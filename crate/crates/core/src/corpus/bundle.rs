use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::split::{
    build_balanced_dataset, carve_ood, split_train_test, stratified_folds, temporal_split,
    withhold_repos,
};
use super::{CurationError, ExampleLabel, LabeledExample};
use crate::artifact::write_atomic;
use crate::labeling::{Category, LabelVerdict};
use crate::seed;

/// What a dataset is for: the TD detector, one TD-type detector, or the
/// 13-way multiclass model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Task {
    Td,
    Category(Category),
    Multiclass,
}

impl Task {
    pub fn is_binary(self) -> bool {
        !matches!(self, Task::Multiclass)
    }

    /// The 14 binary tasks of the ensemble.
    pub fn binary_tasks() -> impl Iterator<Item = Task> {
        std::iter::once(Task::Td).chain(Category::ALL.into_iter().map(Task::Category))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Td => f.write_str("td"),
            Task::Category(c) => f.write_str(&c.slug()),
            Task::Multiclass => f.write_str("multiclass"),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "td" => Ok(Task::Td),
            "multiclass" => Ok(Task::Multiclass),
            other => other
                .parse::<Category>()
                .map(Task::Category)
                .map_err(|_| format!("unknown task {s:?}")),
        }
    }
}

impl From<Task> for String {
    fn from(t: Task) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Task {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        })
    }
}

/// One line of a dataset JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub text: String,
    pub label: ExampleLabel,
    pub repo: String,
    pub issue_id: u64,
    pub created_at: DateTime<Utc>,
    pub split: Option<Split>,
    pub fold: Option<usize>,
}

impl DatasetRow {
    fn new(e: &LabeledExample, split: Option<Split>, fold: Option<usize>) -> Self {
        DatasetRow {
            text: e.text.clone(),
            label: e.label,
            repo: e.repo_name.clone(),
            issue_id: e.issue_id,
            created_at: e.created_at,
            split,
            fold,
        }
    }

    fn into_example(self) -> LabeledExample {
        LabeledExample {
            repo_name: self.repo,
            issue_id: self.issue_id,
            text: self.text,
            label: self.label,
            created_at: self.created_at,
            source_verdict: LabelVerdict::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub ratio: f64,
    pub k: usize,
    pub ood_top_n: usize,
    /// When set, train holds the examples dated before it and test the rest,
    /// replacing the ratio split.
    pub cutoff: Option<DateTime<Utc>>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratio: 0.85,
            k: 5,
            ood_top_n: 1,
            cutoff: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub task: Task,
    pub seed: u64,
    pub rule_set_version: String,
    pub ratio: f64,
    pub k: usize,
    pub ood_top_n: usize,
    pub cutoff: Option<DateTime<Utc>>,
    pub withheld_repos: Vec<String>,
    /// partition name -> class -> count
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

/// A curated dataset with its train/test/OOD partitions and fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub task: Task,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub ood: Vec<LabeledExample>,
    /// Fold index of each train example, aligned with `train`.
    pub folds: Vec<usize>,
    pub seed: u64,
    pub manifest: BundleManifest,
}

fn class_counts(examples: &[LabeledExample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in examples {
        *counts.entry(e.label.to_string()).or_default() += 1;
    }
    counts
}

type Identity = (String, u64, ExampleLabel);

fn identities(examples: &[LabeledExample]) -> HashSet<Identity> {
    examples
        .iter()
        .map(|e| (e.repo_name.clone(), e.issue_id, e.label))
        .collect()
}

impl DatasetBundle {
    fn assemble(
        task: Task,
        train: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
        ood: Vec<LabeledExample>,
        folds: Vec<usize>,
        withheld_repos: Vec<String>,
        cfg: &SplitConfig,
        rule_set_version: &str,
    ) -> Result<Self, CurationError> {
        let counts = BTreeMap::from([
            ("train".to_string(), class_counts(&train)),
            ("test".to_string(), class_counts(&test)),
            ("ood".to_string(), class_counts(&ood)),
        ]);
        let bundle = DatasetBundle {
            task,
            train,
            test,
            ood,
            folds,
            seed: cfg.seed,
            manifest: BundleManifest {
                task,
                seed: cfg.seed,
                rule_set_version: rule_set_version.to_string(),
                ratio: cfg.ratio,
                k: cfg.k,
                ood_top_n: cfg.ood_top_n,
                cutoff: cfg.cutoff,
                withheld_repos,
                counts,
            },
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn partition(&self, split: Split) -> &[LabeledExample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Ood => &self.ood,
        }
    }

    /// Check the partition invariants.
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |msg: String| Err(CurationError::Invariant(msg));
        let train = identities(&self.train);
        let test = identities(&self.test);
        let ood = identities(&self.ood);
        if train.intersection(&test).next().is_some() {
            return bad("train and test share an example".into());
        }
        if train.union(&test).any(|id| ood.contains(id)) {
            return bad("OOD shares an example with train/test".into());
        }
        let ood_repos: HashSet<&str> = self.ood.iter().map(|e| e.repo_name.as_str()).collect();
        if let Some(e) = self
            .train
            .iter()
            .chain(&self.test)
            .find(|e| ood_repos.contains(e.repo_name.as_str()))
        {
            return bad(format!("repository {} is on both sides of the OOD boundary", e.repo_name));
        }
        if self.task.is_binary() {
            let mut pos = 0usize;
            let mut neg = 0usize;
            for e in self.train.iter().chain(&self.test) {
                match e.label {
                    ExampleLabel::Binary(true) => pos += 1,
                    ExampleLabel::Binary(false) => neg += 1,
                    ExampleLabel::Category(_) => {
                        return bad("binary bundle holds a category label".into())
                    }
                }
            }
            if pos != neg {
                return bad(format!("train+test is unbalanced: {pos} positives, {neg} negatives"));
            }
        }
        if self.folds.len() != self.train.len() {
            return bad("fold list does not match the train partition".into());
        }
        if let Some(f) = self.folds.iter().find(|&&f| f >= self.manifest.k) {
            return bad(format!("fold index {f} out of range for k = {}", self.manifest.k));
        }
        Ok(())
    }
}

/// Bundle a balanced binary dataset.
///
/// The `ood_top_n` repositories with the most positives are withheld with all
/// their examples; what remains is re-balanced, split (by ratio, or by the
/// temporal cutoff when set) and fold-assigned.
pub fn build_binary_bundle(
    task: Task,
    dataset: Vec<LabeledExample>,
    cfg: &SplitConfig,
    rule_set_version: &str,
) -> Result<DatasetBundle, CurationError> {
    if !task.is_binary() {
        return Err(CurationError::InvalidArgument(format!("{task} is not a binary task")));
    }
    if dataset.iter().any(|e| e.label.as_bool().is_none()) {
        return Err(CurationError::InvalidArgument(format!(
            "{task} dataset holds non-binary labels"
        )));
    }
    let (positives, negatives): (Vec<_>, Vec<_>) = dataset
        .into_iter()
        .partition(|e| e.label == ExampleLabel::Binary(true));
    let carve = carve_ood(positives, cfg.ood_top_n)?;
    let withheld: BTreeSet<String> = carve.withheld_repos.iter().cloned().collect();
    let (negatives, ood_negatives) = withhold_repos(negatives, &withheld);
    let mut ood = carve.ood;
    ood.extend(ood_negatives);

    let balanced = build_balanced_dataset(
        carve.main,
        negatives,
        seed::derive(cfg.seed, &format!("{task}/rebalance")),
    )?;
    let (train, test) = match cfg.cutoff {
        Some(cutoff) => temporal_split(balanced.examples, cutoff),
        None => split_train_test(
            balanced.examples,
            cfg.ratio,
            seed::derive(cfg.seed, &format!("{task}/split")),
        )?,
    };
    let folds = stratified_folds(&train, cfg.k, seed::derive(cfg.seed, &format!("{task}/folds")))?;
    DatasetBundle::assemble(task, train, test, ood, folds, carve.withheld_repos, cfg, rule_set_version)
}

/// Bundle the multiclass dataset: OOD repositories are ranked over all
/// examples, then a stratified split and folds.
pub fn build_multiclass_bundle(
    dataset: Vec<LabeledExample>,
    cfg: &SplitConfig,
    rule_set_version: &str,
) -> Result<DatasetBundle, CurationError> {
    if dataset.iter().any(|e| e.label.as_category().is_none()) {
        return Err(CurationError::InvalidArgument(
            "multiclass dataset holds non-category labels".into(),
        ));
    }
    let task = Task::Multiclass;
    let carve = carve_ood(dataset, cfg.ood_top_n)?;
    let (train, test) = match cfg.cutoff {
        Some(cutoff) => temporal_split(carve.main, cutoff),
        None => split_train_test(
            carve.main,
            cfg.ratio,
            seed::derive(cfg.seed, &format!("{task}/split")),
        )?,
    };
    let folds = stratified_folds(&train, cfg.k, seed::derive(cfg.seed, &format!("{task}/folds")))?;
    DatasetBundle::assemble(task, train, test, carve.ood, folds, carve.withheld_repos, cfg, rule_set_version)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CurationError + '_ {
    move |cause| CurationError::Io {
        path: path.to_path_buf(),
        cause,
    }
}

fn rows_to_bytes<'a>(rows: impl Iterator<Item = DatasetRow> + 'a) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row).expect("rows serialize");
        out.push(b'\n');
    }
    out
}

fn read_rows(path: &Path) -> Result<Vec<DatasetRow>, CurationError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|cause| CurationError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            cause,
        })?);
    }
    Ok(rows)
}

/// Write an unsplit dataset (split and fold null).
pub fn write_dataset(path: &Path, examples: &[LabeledExample]) -> Result<(), CurationError> {
    let bytes = rows_to_bytes(examples.iter().map(|e| DatasetRow::new(e, None, None)));
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledExample>, CurationError> {
    Ok(read_rows(path)?
        .into_iter()
        .map(DatasetRow::into_example)
        .collect())
}

fn manifest_path(rows_path: &Path) -> PathBuf {
    let stem = rows_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    rows_path.with_file_name(format!("{stem}.manifest.json"))
}

/// Write `<dir>/<task>.jsonl` and its `<task>.manifest.json` sidecar;
/// returns both paths.
pub fn write_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<(PathBuf, PathBuf), CurationError> {
    let rows_path = dir.join(format!("{}.jsonl", bundle.task));
    let rows = bundle
        .train
        .iter()
        .zip(&bundle.folds)
        .map(|(e, &f)| DatasetRow::new(e, Some(Split::Train), Some(f)))
        .chain(bundle.test.iter().map(|e| DatasetRow::new(e, Some(Split::Test), None)))
        .chain(bundle.ood.iter().map(|e| DatasetRow::new(e, Some(Split::Ood), None)));
    write_atomic(&rows_path, &rows_to_bytes(rows)).map_err(io_err(&rows_path))?;
    let manifest_path = manifest_path(&rows_path);
    let manifest = serde_json::to_vec_pretty(&bundle.manifest).expect("manifest serializes");
    write_atomic(&manifest_path, &manifest).map_err(io_err(&manifest_path))?;
    Ok((rows_path, manifest_path))
}

/// Load a bundle from its rows file; the manifest is read from the sidecar.
pub fn read_bundle(rows_path: &Path) -> Result<DatasetBundle, CurationError> {
    let manifest_path = manifest_path(rows_path);
    let manifest_bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: BundleManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|cause| CurationError::Format {
            path: manifest_path.clone(),
            line: 0,
            cause,
        })?;
    let mut train = Vec::new();
    let mut folds = Vec::new();
    let mut test = Vec::new();
    let mut ood = Vec::new();
    for (i, row) in read_rows(rows_path)?.into_iter().enumerate() {
        match (row.split, row.fold) {
            (Some(Split::Train), Some(f)) => {
                folds.push(f);
                train.push(row.into_example());
            }
            (Some(Split::Test), _) => test.push(row.into_example()),
            (Some(Split::Ood), _) => ood.push(row.into_example()),
            _ => {
                return Err(CurationError::Invariant(format!(
                    "{}: row {} lacks a split or a train fold",
                    rows_path.display(),
                    i + 1
                )))
            }
        }
    }
    let bundle = DatasetBundle {
        task: manifest.task,
        seed: manifest.seed,
        train,
        test,
        ood,
        folds,
        manifest,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ex(repo: &str, id: u64, label: bool, year: i32) -> LabeledExample {
        LabeledExample {
            repo_name: repo.into(),
            issue_id: id,
            text: format!("some issue text {id} in {repo} with enough length"),
            label: ExampleLabel::Binary(label),
            created_at: Utc.with_ymd_and_hms(year, 6, 1, 0, 0, 0).unwrap(),
            source_verdict: LabelVerdict::default(),
        }
    }

    fn dataset() -> Vec<LabeledExample> {
        let mut out = Vec::new();
        let mut id = 0;
        // "big/hub" holds the most positives and a few negatives.
        for (repo, pos, neg) in [("big/hub", 40, 5), ("a/one", 30, 50), ("b/two", 30, 45)] {
            for _ in 0..pos {
                id += 1;
                out.push(ex(repo, id, true, 2018 + (id % 7) as i32));
            }
            for _ in 0..neg {
                id += 1;
                out.push(ex(repo, id, false, 2018 + (id % 7) as i32));
            }
        }
        out
    }

    #[test]
    fn binary_bundle_invariants() {
        let cfg = SplitConfig { seed: 11, ..Default::default() };
        let b = build_binary_bundle(Task::Td, dataset(), &cfg, "v").unwrap();
        assert_eq!(b.manifest.withheld_repos, vec!["big/hub".to_string()]);
        assert_eq!(b.ood.len(), 45);
        // 60 positives remain, 95 negatives: re-balanced to 60/60.
        assert_eq!(b.train.len() + b.test.len(), 120);
        assert_eq!(b.train.len(), 102);
        assert_eq!(b.manifest.counts["test"]["true"], 9);
        b.validate().unwrap();
    }

    #[test]
    fn temporal_bundle_has_no_post_cutoff_training() {
        let cutoff = Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap();
        let cfg = SplitConfig { cutoff: Some(cutoff), seed: 3, ..Default::default() };
        let b = build_binary_bundle(Task::Td, dataset(), &cfg, "v").unwrap();
        assert!(b.train.iter().all(|e| e.created_at < cutoff));
        assert!(b.test.iter().all(|e| e.created_at >= cutoff));
        assert!(!b.test.is_empty());
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SplitConfig { seed: 5, ..Default::default() };
        let b = build_binary_bundle(Task::Category(Category::Build), dataset(), &cfg, "v").unwrap();
        let (rows, manifest) = write_bundle(dir.path(), &b).unwrap();
        assert_eq!(rows.file_name().unwrap(), "build.jsonl");
        assert_eq!(manifest.file_name().unwrap(), "build.manifest.json");
        let back = read_bundle(&rows).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn validate_catches_leaks() {
        let cfg = SplitConfig { seed: 5, ..Default::default() };
        let mut b = build_binary_bundle(Task::Td, dataset(), &cfg, "v").unwrap();
        let leaked = b.train[0].clone();
        b.ood.push(leaked);
        assert!(matches!(b.validate(), Err(CurationError::Invariant(_))));
    }

    #[test]
    fn task_names() {
        for t in Task::binary_tasks().chain([Task::Multiclass]) {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        assert_eq!(Task::binary_tasks().count(), 14);
        assert_eq!(Task::Category(Category::Infrastructure).to_string(), "infrastructure");
    }

    #[test]
    fn row_format_field_names() {
        let row = DatasetRow::new(&ex("a/b", 1, true, 2020), Some(Split::Ood), None);
        let v = serde_json::to_value(&row).unwrap();
        assert_eq!(v["split"], "ood");
        assert_eq!(v["label"], true);
        assert!(v["fold"].is_null());
        let cat = DatasetRow {
            label: ExampleLabel::Category(Category::Test),
            ..row
        };
        assert_eq!(serde_json::to_value(&cat).unwrap()["label"], "Test");
    }
}
