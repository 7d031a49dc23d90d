//! Dataset curation: text cleaning, deduplication, balancing, OOD carve-out,
//! stratified splits and folds, and the on-disk bundle format.

mod bundle;
mod clean;
mod split;

use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::IssueKey;
use crate::labeling::{Category, LabelVerdict};

pub use bundle::{
    build_binary_bundle, build_multiclass_bundle, read_bundle, read_dataset, write_bundle,
    write_dataset, BundleManifest, DatasetBundle, DatasetRow, Split, SplitConfig, Task,
};
pub use clean::{clean_text, Rejection, TextCleaner, DEFAULT_MIN_LEN};
pub use split::{
    build_balanced_dataset, build_multiclass_dataset, carve_ood, deduplicate, purge_ground_truth,
    split_train_test, stratified_folds, temporal_split, withhold_repos, Balanced, OodCarve,
};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("cannot balance: {which} pool is empty")]
    EmptyPool { which: &'static str },
    #[error("cannot withhold {top_n} repositories: only {distinct} distinct repositories, none would remain")]
    TooFewRepos { distinct: usize, top_n: usize },
    #[error("class {class} has {size} examples, needs at least {needed}")]
    ClassTooSmall {
        class: String,
        size: usize,
        needed: usize,
    },
    #[error("category {0} has no examples")]
    EmptyCategory(Category),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bundle invariant violated: {0}")]
    Invariant(String),
    #[error("{}: {cause}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        cause: std::io::Error,
    },
    #[error("{}:{line}: {cause}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        #[source]
        cause: serde_json::Error,
    },
}

/// Target of one example: a boolean for binary tasks, a category for the
/// multiclass task. Serialized untagged (`true` / `"Build"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExampleLabel {
    Binary(bool),
    Category(Category),
}

impl ExampleLabel {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            ExampleLabel::Binary(b) => Some(b),
            ExampleLabel::Category(_) => None,
        }
    }

    pub fn as_category(self) -> Option<Category> {
        match self {
            ExampleLabel::Category(c) => Some(c),
            ExampleLabel::Binary(_) => None,
        }
    }
}

impl fmt::Display for ExampleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExampleLabel::Binary(b) => write!(f, "{b}"),
            ExampleLabel::Category(c) => write!(f, "{c}"),
        }
    }
}

/// A cleaned issue with its target label.
///
/// `source_verdict` is only populated while a dataset is being curated; it is
/// not part of the row format and reads back as the default verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub repo_name: String,
    pub issue_id: u64,
    pub text: String,
    pub label: ExampleLabel,
    pub created_at: DateTime<Utc>,
    pub source_verdict: LabelVerdict,
}

impl LabeledExample {
    pub fn key(&self) -> IssueKey {
        IssueKey {
            repo: self.repo_name.clone(),
            issue_id: self.issue_id,
        }
    }

    pub fn with_label(mut self, label: ExampleLabel) -> Self {
        self.label = label;
        self
    }
}
