//! Technical-debt issue mining and classification toolkit.
//!
//! The crate is organised as a sequence of pipeline stages:
//!
//! - [`ingest`] streams GitHub Archive event logs into [`ingest::IssueRecord`]s.
//! - [`labeling`] applies the TD and TD-type label regexes to issue labels.
//! - [`corpus`] cleans issue text and assembles balanced, split, fold-assigned
//!   and out-of-distribution datasets.
//! - [`classifier`] holds the scoring interface, the hashed bag-of-words
//!   baseline, the exported-model adapter and the rule-based ensemble.
//! - [`metrics`] computes confusion-based metrics, MCC, ROC-AUC and the
//!   ground-truth recall table.
//! - [`pipeline`] wires the stages into reproducible, manifest-logged runs.

mod artifact;
pub mod classifier;
pub mod corpus;
pub mod ingest;
pub mod labeling;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use classifier::{EnsembleVerdict, TextClassifier};
pub use corpus::{DatasetBundle, LabeledExample};
pub use ingest::{IngestStats, IssueRecord};
pub use labeling::{Category, LabelRuleSet, LabelVerdict};
pub use metrics::{ConfusionMatrix, EvalReport};
