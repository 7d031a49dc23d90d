use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use rand::seq::{index, SliceRandom};

use super::{CurationError, ExampleLabel, LabeledExample};
use crate::ingest::IssueKey;
use crate::labeling::Category;
use crate::seed;

/// Keep the first example of every distinct text.
pub fn deduplicate(examples: Vec<LabeledExample>) -> Vec<LabeledExample> {
    let mut seen = HashSet::with_capacity(examples.len());
    examples
        .into_iter()
        .filter(|e| seen.insert(e.text.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub examples: Vec<LabeledExample>,
    /// `(available, kept)` when positives had to be downsampled.
    pub downsampled_positives: Option<(usize, usize)>,
}

impl Balanced {
    pub fn positives(&self) -> impl Iterator<Item = &LabeledExample> {
        self.examples
            .iter()
            .filter(|e| e.label == ExampleLabel::Binary(true))
    }
}

fn sample_sorted(len: usize, n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut picked = index::sample(rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

fn take_indices(mut items: Vec<LabeledExample>, picked: &[usize]) -> Vec<LabeledExample> {
    let mut slots: Vec<Option<LabeledExample>> = items.drain(..).map(Some).collect();
    picked
        .iter()
        .map(|&i| slots[i].take().expect("indices are distinct"))
        .collect()
}

/// Equal numbers of positives and negatives, `n = min(|positives|, |pool|)`.
///
/// Negatives are drawn uniformly without replacement; positives are only
/// sampled when the pool is the smaller side. Labels are overwritten with
/// `true` / `false`. Output holds the kept positives followed by the drawn
/// negatives, each in input order.
pub fn build_balanced_dataset(
    positives: Vec<LabeledExample>,
    negative_pool: Vec<LabeledExample>,
    seed: u64,
) -> Result<Balanced, CurationError> {
    if positives.is_empty() {
        return Err(CurationError::EmptyPool { which: "positive" });
    }
    if negative_pool.is_empty() {
        return Err(CurationError::EmptyPool { which: "negative" });
    }
    let n = positives.len().min(negative_pool.len());
    let mut rng = seed::rng(seed);

    let available = positives.len();
    let (positives, downsampled_positives) = if available > n {
        tracing::warn!(available, kept = n, "downsampling positives to the negative pool size");
        let picked = sample_sorted(available, n, &mut rng);
        (take_indices(positives, &picked), Some((available, n)))
    } else {
        (positives, None)
    };
    let picked = sample_sorted(negative_pool.len(), n, &mut rng);
    let negatives = take_indices(negative_pool, &picked);

    let examples = positives
        .into_iter()
        .map(|e| e.with_label(ExampleLabel::Binary(true)))
        .chain(
            negatives
                .into_iter()
                .map(|e| e.with_label(ExampleLabel::Binary(false))),
        )
        .collect();
    Ok(Balanced {
        examples,
        downsampled_positives,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodCarve {
    pub main: Vec<LabeledExample>,
    pub ood: Vec<LabeledExample>,
    pub withheld_repos: Vec<String>,
}

/// Move every example of the `top_n` repositories with the most examples
/// into the out-of-distribution set. Ties go to the lexicographically
/// smaller repository name.
pub fn carve_ood(examples: Vec<LabeledExample>, top_n: usize) -> Result<OodCarve, CurationError> {
    if top_n == 0 {
        return Ok(OodCarve {
            main: examples,
            ood: Vec::new(),
            withheld_repos: Vec::new(),
        });
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &examples {
        *counts.entry(e.repo_name.as_str()).or_default() += 1;
    }
    if counts.len() < top_n + 1 {
        return Err(CurationError::TooFewRepos {
            distinct: counts.len(),
            top_n,
        });
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap order already sorts names; a stable sort keeps it among ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let withheld: BTreeSet<String> = ranked[..top_n].iter().map(|(r, _)| r.to_string()).collect();
    let withheld_repos = ranked[..top_n].iter().map(|(r, _)| r.to_string()).collect();
    let (main, ood) = withhold_repos(examples, &withheld);
    Ok(OodCarve {
        main,
        ood,
        withheld_repos,
    })
}

/// Split off every example whose repository is in `repos`: `(kept, withheld)`.
pub fn withhold_repos(
    examples: Vec<LabeledExample>,
    repos: &BTreeSet<String>,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    examples
        .into_iter()
        .partition(|e| !repos.contains(&e.repo_name))
}

fn group_by_label(examples: &[LabeledExample]) -> BTreeMap<ExampleLabel, Vec<usize>> {
    let mut groups: BTreeMap<ExampleLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.label).or_default().push(i);
    }
    groups
}

/// Stratified train/test split. Per class, after a seeded shuffle,
/// `floor(ratio * n)` examples go to train and the rest to test.
pub fn split_train_test(
    dataset: Vec<LabeledExample>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>), CurationError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CurationError::InvalidArgument(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let groups = group_by_label(&dataset);
    if let Some((label, members)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(CurationError::ClassTooSmall {
            class: label.to_string(),
            size: members.len(),
            needed: 2,
        });
    }
    let mut rng = seed::rng(seed);
    let mut train_order = Vec::new();
    let mut test_order = Vec::new();
    for mut members in groups.into_values() {
        members.shuffle(&mut rng);
        // Guard against 0.85 * n landing a hair below an integer.
        let n_train = (ratio * members.len() as f64 + 1e-9).floor() as usize;
        train_order.extend_from_slice(&members[..n_train]);
        test_order.extend_from_slice(&members[n_train..]);
    }
    let mut slots: Vec<Option<LabeledExample>> = dataset.into_iter().map(Some).collect();
    let mut take = |order: &[usize]| -> Vec<LabeledExample> {
        order.iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let train = take(&train_order);
    let test = take(&test_order);
    Ok((train, test))
}

/// Stratified fold index per example, `0..k`. Within each class the fold
/// sizes differ by at most one; the rotation continues across classes so the
/// folds also stay level overall.
pub fn stratified_folds(
    examples: &[LabeledExample],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, CurationError> {
    if k < 2 {
        return Err(CurationError::InvalidArgument(format!(
            "k must be at least 2, got {k}"
        )));
    }
    let groups = group_by_label(examples);
    if let Some((label, members)) = groups.iter().find(|(_, m)| m.len() < k) {
        return Err(CurationError::ClassTooSmall {
            class: label.to_string(),
            size: members.len(),
            needed: k,
        });
    }
    let mut rng = seed::rng(seed);
    let mut folds = vec![0; examples.len()];
    let mut offset = 0;
    for mut members in groups.into_values() {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok(folds)
}

/// `(created_at < cutoff, created_at >= cutoff)`.
pub fn temporal_split(
    examples: Vec<LabeledExample>,
    cutoff: DateTime<Utc>,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    examples.into_iter().partition(|e| e.created_at < cutoff)
}

/// Drop every example whose issue is in `ground_truth`.
pub fn purge_ground_truth(
    dataset: Vec<LabeledExample>,
    ground_truth: &HashSet<IssueKey>,
) -> Vec<LabeledExample> {
    let before = dataset.len();
    let kept: Vec<_> = dataset
        .into_iter()
        .filter(|e| !ground_truth.contains(&e.key()))
        .collect();
    if before > 0 && kept.is_empty() {
        tracing::warn!(before, "ground-truth purge removed every example");
    }
    kept
}

/// Union of per-category positives labelled with their category. An issue
/// listed under several categories yields one example per category. Class
/// frequencies are left as they are; the union is shuffled.
pub fn build_multiclass_dataset(
    per_category: &BTreeMap<Category, Vec<LabeledExample>>,
    seed: u64,
) -> Result<Vec<LabeledExample>, CurationError> {
    if let Some((&category, _)) = per_category.iter().find(|(_, v)| v.is_empty()) {
        return Err(CurationError::EmptyCategory(category));
    }
    let mut examples: Vec<LabeledExample> = per_category
        .iter()
        .flat_map(|(&category, list)| {
            list.iter()
                .cloned()
                .map(move |e| e.with_label(ExampleLabel::Category(category)))
        })
        .collect();
    examples.shuffle(&mut seed::rng(seed));
    Ok(examples)
}
