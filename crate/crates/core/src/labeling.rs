//! Label-regex labeling of issues.
//!
//! Two case-insensitive patterns run over the label texts of an issue: one
//! detects technical-debt labels, the other detects one of the 13 TD-type
//! categories. An issue that carries both kinds of label is a ground-truth
//! issue; those are kept apart from every training partition.

use std::collections::BTreeSet;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::IssueRecord;

/// TD label pattern. Note that `T` + `D` + `D` matches, so "TDD" labels are
/// picked up as TD; this is kept as is.
pub const TD_PATTERN: &str = r"(?i)\b(T(echnical[-_\s]?|ech[-_\s]?)?D(ebt|D)|\b(TD|td)\b|debt)\b";

/// TD-type label pattern.
pub const TYPE_PATTERN: &str = r"(?i)\b(architect(ure|ural)?|build|code|defect|design|doc(umentation)?|infrastructure|people|process|requirement|service|test(ing)?|automation)\b";

pub const RULESET_VERSION: &str = "td-labels/1";

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("invalid {which} pattern: {cause}")]
    Pattern {
        which: &'static str,
        #[source]
        cause: regex::Error,
    },
    #[error("rule set maps {0} more than once")]
    DuplicateCategory(Category),
    #[error("rule set has no alternation for {0}")]
    MissingCategory(Category),
    #[error("rule set file: {0}")]
    Format(#[from] serde_json::Error),
}

/// The 13 TD types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Architecture,
    Automation,
    Build,
    Code,
    Defect,
    Design,
    Documentation,
    Infrastructure,
    People,
    Process,
    Requirement,
    Service,
    Test,
}

impl Category {
    pub const ALL: [Category; 13] = [
        Category::Architecture,
        Category::Automation,
        Category::Build,
        Category::Code,
        Category::Defect,
        Category::Design,
        Category::Documentation,
        Category::Infrastructure,
        Category::People,
        Category::Process,
        Category::Requirement,
        Category::Service,
        Category::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Architecture => "Architecture",
            Category::Automation => "Automation",
            Category::Build => "Build",
            Category::Code => "Code",
            Category::Defect => "Defect",
            Category::Design => "Design",
            Category::Documentation => "Documentation",
            Category::Infrastructure => "Infrastructure",
            Category::People => "People",
            Category::Process => "Process",
            Category::Requirement => "Requirement",
            Category::Service => "Service",
            Category::Test => "Test",
        }
    }

    /// Lowercase name, used for file and directory names.
    pub fn slug(self) -> String {
        self.name().to_ascii_lowercase()
    }

    /// Position in [`Category::ALL`]; also the output index of 13-way models.
    pub fn index(self) -> usize {
        self as usize
    }

    /// The part of [`TYPE_PATTERN`] that selects this category.
    pub fn alternation(self) -> &'static str {
        match self {
            Category::Architecture => "architect(ure|ural)?",
            Category::Automation => "automation",
            Category::Build => "build",
            Category::Code => "code",
            Category::Defect => "defect",
            Category::Design => "design",
            Category::Documentation => "doc(umentation)?",
            Category::Infrastructure => "infrastructure",
            Category::People => "people",
            Category::Process => "process",
            Category::Requirement => "requirement",
            Category::Service => "service",
            Category::Test => "test(ing)?",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("unknown category {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

/// Serialized form of a rule set, so audits can diff it against the
/// published listings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSetConfig {
    pub version: String,
    pub td_pattern: String,
    pub type_pattern: String,
    pub categories: Vec<CategoryRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRule {
    pub category: Category,
    pub alternation: String,
}

impl Default for RuleSetConfig {
    fn default() -> Self {
        RuleSetConfig {
            version: RULESET_VERSION.to_string(),
            td_pattern: TD_PATTERN.to_string(),
            type_pattern: TYPE_PATTERN.to_string(),
            categories: Category::ALL
                .into_iter()
                .map(|category| CategoryRule {
                    category,
                    alternation: category.alternation().to_string(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Td,
    Type,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelMatch {
    pub label: String,
    pub pattern: PatternKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVerdict {
    pub is_td: bool,
    pub categories: BTreeSet<Category>,
    pub is_ground_truth: bool,
    pub matched_label_texts: Vec<LabelMatch>,
}

/// Compiled, immutable rule set.
#[derive(Debug, Clone)]
pub struct LabelRuleSet {
    config: RuleSetConfig,
    td: Regex,
    types: Regex,
    /// Anchored per-category alternations, used to map a type match back to
    /// its category.
    categories: Vec<(Category, Regex)>,
}

impl Default for LabelRuleSet {
    fn default() -> Self {
        Self::from_config(RuleSetConfig::default()).expect("built-in patterns compile")
    }
}

impl LabelRuleSet {
    pub fn from_config(config: RuleSetConfig) -> Result<Self, LabelingError> {
        let td = Regex::new(&config.td_pattern).map_err(|cause| LabelingError::Pattern {
            which: "td",
            cause,
        })?;
        let types = Regex::new(&config.type_pattern).map_err(|cause| LabelingError::Pattern {
            which: "type",
            cause,
        })?;
        let mut seen = BTreeSet::new();
        let mut categories = Vec::with_capacity(config.categories.len());
        for rule in &config.categories {
            if !seen.insert(rule.category) {
                return Err(LabelingError::DuplicateCategory(rule.category));
            }
            let anchored = Regex::new(&format!("(?i)^(?:{})$", rule.alternation)).map_err(
                |cause| LabelingError::Pattern {
                    which: "category",
                    cause,
                },
            )?;
            categories.push((rule.category, anchored));
        }
        if let Some(missing) = Category::ALL.into_iter().find(|c| !seen.contains(c)) {
            return Err(LabelingError::MissingCategory(missing));
        }
        Ok(LabelRuleSet {
            config,
            td,
            types,
            categories,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, LabelingError> {
        Self::from_config(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.config).expect("rule set serializes")
    }

    pub fn config(&self) -> &RuleSetConfig {
        &self.config
    }

    pub fn version(&self) -> &str {
        &self.config.version
    }

    /// Whether any label carries a TD match, plus the matching labels verbatim.
    pub fn match_td_labels<S: AsRef<str>>(&self, labels: &[S]) -> (bool, Vec<String>) {
        let matched: Vec<String> = labels
            .iter()
            .map(AsRef::as_ref)
            .filter(|l| self.td.is_match(l))
            .map(str::to_string)
            .collect();
        (!matched.is_empty(), matched)
    }

    pub fn match_type_labels<S: AsRef<str>>(&self, labels: &[S]) -> BTreeSet<Category> {
        self.type_matches(labels).0
    }

    fn type_matches<S: AsRef<str>>(&self, labels: &[S]) -> (BTreeSet<Category>, Vec<String>) {
        let mut found = BTreeSet::new();
        let mut matched = Vec::new();
        for label in labels.iter().map(AsRef::as_ref) {
            let mut any = false;
            for m in self.types.find_iter(label) {
                any = true;
                if let Some(category) = self.category_of(m.as_str()) {
                    found.insert(category);
                }
            }
            if any {
                matched.push(label.to_string());
            }
        }
        (found, matched)
    }

    fn category_of(&self, matched: &str) -> Option<Category> {
        self.categories
            .iter()
            .find(|(_, re)| re.is_match(matched))
            .map(|(c, _)| *c)
    }

    pub fn classify<S: AsRef<str>>(&self, labels: &[S]) -> LabelVerdict {
        let (is_td, td_labels) = self.match_td_labels(labels);
        let (categories, type_labels) = self.type_matches(labels);
        let mut matched_label_texts: Vec<LabelMatch> = td_labels
            .into_iter()
            .map(|label| LabelMatch {
                label,
                pattern: PatternKind::Td,
            })
            .collect();
        matched_label_texts.extend(type_labels.into_iter().map(|label| LabelMatch {
            label,
            pattern: PatternKind::Type,
        }));
        LabelVerdict {
            is_td,
            is_ground_truth: is_td && !categories.is_empty(),
            categories,
            matched_label_texts,
        }
    }

    pub fn classify_labels(&self, record: &IssueRecord) -> LabelVerdict {
        self.classify(&record.labels)
    }

    /// Split records by verdict. Ground-truth issues land only in
    /// `ground_truth`; an issue with several categories appears once in each
    /// of its category lists.
    pub fn partition_by_verdict(&self, records: Vec<IssueRecord>) -> Partition {
        let mut partition = Partition::default();
        for record in records {
            let verdict = self.classify_labels(&record);
            let item = Classified { record, verdict };
            if item.verdict.is_ground_truth {
                partition.ground_truth.push(item);
            } else if item.verdict.is_td {
                partition.td_positives.push(item);
            } else if !item.verdict.categories.is_empty() {
                for &category in &item.verdict.categories {
                    partition
                        .per_category
                        .entry(category)
                        .or_default()
                        .push(item.clone());
                }
            } else {
                partition.residual.push(item);
            }
        }
        partition
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classified {
    pub record: IssueRecord,
    pub verdict: LabelVerdict,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub td_positives: Vec<Classified>,
    pub per_category: BTreeMap<Category, Vec<Classified>>,
    pub ground_truth: Vec<Classified>,
    pub residual: Vec<Classified>,
}
