//! Oracles and corpus generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use debtlens_core::corpus::{
    build_binary_bundle, purge_ground_truth, split_train_test, stratified_folds, CurationError, DatasetBundle,
    ExampleLabel, LabeledExample, SplitConfig, Task,
};
use debtlens_core::classifier::baseline::{binary_loss_and_gradient, multiclass_loss_and_gradient};
use debtlens_core::classifier::features::SparseVec;
use debtlens_core::ingest::IssueKey;
use debtlens_core::labeling::LabelVerdict;
use num::bigint::BigInt;
use num::rational::BigRational;
use num::{Signed, ToPrimitive, Zero};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- metrics

fn ratio(num: u64, den: u64) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

/// Precision, recall, accuracy, F1 and MCC computed in exact rational
/// arithmetic straight from the definitions. MCC is assembled from its
/// exact square, so only the final square root is rounded.
pub fn oracle_metrics(tp: u64, fp: u64, tn: u64, fn_: u64) -> [f64; 5] {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let acc = ratio(tp + tn, tp + fp + tn + fn_);
    let f1 = if (&p + &r).is_zero() {
        BigRational::zero()
    } else {
        BigRational::from_integer(BigInt::from(2)) * &p * &r / (&p + &r)
    };
    let num = BigInt::from(tp) * BigInt::from(tn) - BigInt::from(fp) * BigInt::from(fn_);
    let den = BigInt::from(tp + fp) * BigInt::from(tp + fn_) * BigInt::from(tn + fp) * BigInt::from(tn + fn_);
    let mcc = if den.is_zero() {
        0.0
    } else {
        let sq = BigRational::new(&num * &num, den).to_f64().unwrap();
        let sign = if num.is_negative() { -1.0 } else { 1.0 };
        sign * sq.sqrt()
    };
    [
        p.to_f64().unwrap(),
        r.to_f64().unwrap(),
        acc.to_f64().unwrap(),
        f1.to_f64().unwrap(),
        mcc,
    ]
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every pair.
pub fn pairwise_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &ti) in truths.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in truths.iter().enumerate() {
            if tj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random confusion matrices, a sixth of them with an empty marginal.
pub fn random_matrices(n: usize, seed: u64) -> Vec<[u64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut m = [0u64; 4];
            for c in m.iter_mut() {
                *c = match rng.random_range(0..4) {
                    0 => rng.random_range(0..5),
                    1 => rng.random_range(0..1_000),
                    _ => rng.random_range(0..1_000_000),
                };
            }
            if i % 6 == 0 {
                // Zero a row or column of the table.
                match rng.random_range(0..4) {
                    0 => (m[0], m[1]) = (0, 0),
                    1 => (m[0], m[3]) = (0, 0),
                    2 => (m[2], m[1]) = (0, 0),
                    _ => (m[2], m[3]) = (0, 0),
                }
            }
            m
        })
        .collect()
}

/// Score/label vectors of length 2..=200 with both classes present. Scores
/// are drawn from a small grid a third of the time so ties are common.
pub fn random_score_vectors(n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(2..=200);
            let grid = i % 3 == 0;
            let mut truths: Vec<bool> = (0..len).map(|_| rng.random_bool(0.4)).collect();
            truths[0] = true;
            truths[1] = false;
            let scores = (0..len)
                .map(|_| {
                    if grid {
                        f64::from(rng.random_range(0..6u8)) / 5.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            (scores, truths)
        })
        .collect()
}

// ---------------------------------------------------------------- corpora

pub fn date(days: i64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap() + Duration::days(days)
}

pub fn example(repo: &str, id: u64, text: String, label: ExampleLabel, created_at: DateTime<Utc>) -> LabeledExample {
    LabeledExample {
        repo_name: repo.to_string(),
        issue_id: id,
        text,
        label,
        created_at,
        source_verdict: LabelVerdict::default(),
    }
}

/// A binary dataset over several repositories: per repo, a positive and a
/// negative count. Every text is distinct.
pub fn binary_corpus(repos: &[(usize, usize)], seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut id = 0;
    for (r, &(pos, neg)) in repos.iter().enumerate() {
        let repo = format!("owner{r}/repo{r}");
        for (count, label) in [(pos, true), (neg, false)] {
            for _ in 0..count {
                id += 1;
                out.push(example(
                    &repo,
                    id,
                    format!("issue {id} in {repo} label {label}"),
                    ExampleLabel::Binary(label),
                    date(rng.random_range(0..3650)),
                ));
            }
        }
    }
    out
}

const POSITIVE_WORDS: &[&str] = &[
    "refactor", "workaround", "hack", "legacy", "cleanup", "todo", "shortcut", "kludge", "rewrite", "fixme",
];
const NEGATIVE_WORDS: &[&str] = &[
    "feature", "request", "crash", "typo", "question", "support", "button", "color", "login", "upload",
];
const SHARED_WORDS: &[&str] = &[
    "the", "a", "module", "we", "should", "this", "issue", "code", "when", "please", "it", "and", "for", "on",
];

fn sentence(rng: &mut ChaCha8Rng, topical: &[&str], n_topical: usize, n_shared: usize) -> String {
    let mut words: Vec<&str> = (0..n_topical).map(|_| *topical.choose(rng).unwrap()).collect();
    words.extend((0..n_shared).map(|_| *SHARED_WORDS.choose(rng).unwrap()));
    for i in (1..words.len()).rev() {
        let j = rng.random_range(0..=i);
        words.swap(i, j);
    }
    words.join(" ")
}

/// Balanced, linearly separable texts: each carries 2..5 words from its
/// class vocabulary among 4..10 shared words.
pub fn separable_corpus(n: usize, seed: u64) -> (Vec<String>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2 == 0;
        let vocab = if label { POSITIVE_WORDS } else { NEGATIVE_WORDS };
        let k = rng.random_range(2..=5);
        let s = rng.random_range(4..=10);
        texts.push(sentence(&mut rng, vocab, k, s));
        labels.push(label);
    }
    (texts, labels)
}

const CLASS_WORDS: [&[&str]; 4] = [
    &["compile", "linker", "gradle", "makefile", "toolchain", "bundler"],
    &["coverage", "flaky", "fixture", "mocking", "assertion", "harness"],
    &["readme", "docstring", "tutorial", "changelog", "guide", "wiki"],
    &["cluster", "terraform", "network", "provisioning", "storage", "servers"],
];

/// Four classes in the proportions 10:1:1:1. A text carries one or two words
/// of its class and, half the time, one word of another class.
pub fn imbalanced_corpus(minority: usize, seed: u64) -> (Vec<String>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [10 * minority, minority, minority, minority];
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (class, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let mut words: Vec<&str> = (0..rng.random_range(1..=2))
                .map(|_| *CLASS_WORDS[class].choose(&mut rng).unwrap())
                .collect();
            if rng.random_bool(0.5) {
                let other = (class + rng.random_range(1..4)) % 4;
                words.push(CLASS_WORDS[other].choose(&mut rng).unwrap());
            }
            words.extend((0..rng.random_range(3..8)).map(|_| *SHARED_WORDS.choose(&mut rng).unwrap()));
            for i in (1..words.len()).rev() {
                let j = rng.random_range(0..=i);
                words.swap(i, j);
            }
            texts.push(words.join(" "));
            labels.push(class);
        }
    }
    (texts, labels)
}

/// Texts of no class: shared words and, half the time, one word of a random
/// class.
pub fn residual_texts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut words: Vec<&str> = (0..rng.random_range(3..8)).map(|_| *SHARED_WORDS.choose(&mut rng).unwrap()).collect();
            if rng.random_bool(0.5) {
                let class = rng.random_range(0..4);
                words.insert(rng.random_range(0..=words.len()), CLASS_WORDS[class].choose(&mut rng).unwrap());
            }
            words.join(" ")
        })
        .collect()
}

/// Stratified-by-position fold map: example i goes to fold i mod k within
/// its class.
pub fn round_robin_folds<T: Ord + Copy>(labels: &[T], k: usize) -> Vec<usize> {
    let mut seen: BTreeMap<T, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let c = seen.entry(*l).or_default();
            *c += 1;
            (*c - 1) % k
        })
        .collect()
}

// ---------------------------------------------------------------- curation invariants

fn count(examples: &[LabeledExample], label: bool) -> usize {
    examples.iter().filter(|e| e.label == ExampleLabel::Binary(label)).count()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Every curation invariant on one random corpus. `repos` gives the
/// positive and negative count of each repository.
pub fn curation_invariants(repos: &[(usize, usize)], seed: u64, cutoff_day: i64) -> Result<(), String> {
    let corpus = binary_corpus(repos, seed);
    let cfg = SplitConfig {
        seed,
        ..SplitConfig::default()
    };
    let bundle = match build_binary_bundle(Task::Td, corpus.clone(), &cfg, "v") {
        Ok(b) => b,
        // Corpora too small to split are legitimately refused.
        Err(CurationError::ClassTooSmall { .. } | CurationError::EmptyPool { .. }) => return Ok(()),
        // Withholding the only repository with positives would leave none.
        Err(CurationError::TooFewRepos { .. }) if repos.iter().filter(|r| r.0 > 0).count() <= 1 => return Ok(()),
        Err(e) => return Err(format!("unexpected error: {e}")),
    };

    // Balance exactness.
    let main: Vec<LabeledExample> = bundle.train.iter().chain(&bundle.test).cloned().collect();
    let (pos, neg) = (count(&main, true), count(&main, false));
    check(pos == neg, || format!("unbalanced main set: {pos} vs {neg}"))?;
    let withheld: HashSet<&str> = bundle.manifest.withheld_repos.iter().map(String::as_str).collect();
    let avail_pos = corpus
        .iter()
        .filter(|e| e.label == ExampleLabel::Binary(true) && !withheld.contains(e.repo_name.as_str()))
        .count();
    let avail_neg = corpus
        .iter()
        .filter(|e| e.label == ExampleLabel::Binary(false) && !withheld.contains(e.repo_name.as_str()))
        .count();
    check(pos == avail_pos.min(avail_neg), || {
        format!("main set has {pos} per class, expected min({avail_pos}, {avail_neg})")
    })?;

    // Rounding rule, per class.
    let n_train = ((0.85 * pos as f64) + 1e-9).floor() as usize;
    for label in [true, false] {
        let got = count(&bundle.train, label);
        check(got == n_train, || format!("class {label}: {got} train examples, expected {n_train}"))?;
    }

    // OOD: withheld repos are exactly the top repository by positives.
    let mut per_repo: BTreeMap<&str, usize> = BTreeMap::new();
    for e in corpus.iter().filter(|e| e.label == ExampleLabel::Binary(true)) {
        *per_repo.entry(e.repo_name.as_str()).or_default() += 1;
    }
    let top = per_repo
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(r, _)| r.to_string())
        .unwrap();
    check(bundle.manifest.withheld_repos == vec![top.clone()], || {
        format!("withheld {:?}, expected {top}", bundle.manifest.withheld_repos)
    })?;
    let ood_repos: HashSet<&str> = bundle.ood.iter().map(|e| e.repo_name.as_str()).collect();
    check(main.iter().all(|e| !ood_repos.contains(e.repo_name.as_str())), || {
        "a repository is on both sides of the OOD boundary".into()
    })?;
    let expected_ood = corpus.iter().filter(|e| e.repo_name == top).count();
    check(bundle.ood.len() == expected_ood, || {
        format!("OOD has {} examples, the withheld repo {expected_ood}", bundle.ood.len())
    })?;

    // Fold sizes per class within one of each other.
    for label in [true, false] {
        let mut sizes = vec![0usize; cfg.k];
        for (e, &f) in bundle.train.iter().zip(&bundle.folds) {
            if e.label == ExampleLabel::Binary(label) {
                sizes[f] += 1;
            }
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        check(hi - lo <= 1, || format!("class {label} fold sizes {sizes:?}"))?;
    }

    // Ground-truth purge leaves nothing of the ground truth and drops
    // nothing else.
    let gt: HashSet<IssueKey> = corpus.iter().step_by(3).map(|e| e.key()).collect();
    let purged = purge_ground_truth(corpus.clone(), &gt);
    check(purged.iter().all(|e| !gt.contains(&e.key())), || "purge left a ground-truth issue".into())?;
    check(purged.len() == corpus.len() - gt.len(), || "purge removed a non-ground-truth issue".into())?;

    // Temporal split.
    let cutoff = date(cutoff_day);
    let temporal = SplitConfig {
        cutoff: Some(cutoff),
        ..cfg.clone()
    };
    match build_binary_bundle(Task::Td, corpus.clone(), &temporal, "v") {
        Ok(b) => {
            check(b.train.iter().all(|e| e.created_at < cutoff), || "post-cutoff training example".into())?;
            check(b.test.iter().all(|e| e.created_at >= cutoff), || "pre-cutoff test example".into())?;
        }
        Err(CurationError::ClassTooSmall { .. } | CurationError::EmptyPool { .. }) => {}
        Err(e) => return Err(format!("temporal split: {e}")),
    }

    // Determinism.
    let again = build_binary_bundle(Task::Td, corpus, &cfg, "v").map_err(|e| e.to_string())?;
    check(again == bundle, || "same seed gave a different bundle".into())?;
    Ok(())
}

/// Stratified split and folds on a multi-class list, checked per class.
pub fn split_and_fold_counts(sizes: &[usize], ratio: f64, k: usize, seed: u64) -> Result<(), String> {
    let mut examples = Vec::new();
    let mut id = 0;
    for (class, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            id += 1;
            examples.push(example(
                "o/r",
                id,
                format!("text {id}"),
                ExampleLabel::Binary(class == 0),
                date(0),
            ));
        }
    }
    let (train, test) = split_train_test(examples, ratio, seed).map_err(|e| e.to_string())?;
    for (class, &n) in sizes.iter().enumerate() {
        let label = class == 0;
        let want = (ratio * n as f64 + 1e-9).floor() as usize;
        check(count(&train, label) == want, || format!("class {class}: train {}", count(&train, label)))?;
        check(count(&test, label) == n - want, || format!("class {class}: test {}", count(&test, label)))?;
    }
    let smallest = (0..sizes.len()).map(|c| count(&train, c == 0)).min().unwrap();
    let folds = match stratified_folds(&train, k, seed) {
        Err(CurationError::ClassTooSmall { .. }) if smallest < k => return Ok(()),
        Err(e) => return Err(e.to_string()),
        Ok(_) if smallest < k => return Err(format!("{smallest} examples accepted for {k} folds")),
        Ok(f) => f,
    };
    for class in 0..sizes.len() {
        let mut per_fold = vec![0usize; k];
        for (e, &f) in train.iter().zip(&folds) {
            if e.label == ExampleLabel::Binary(class == 0) {
                per_fold[f] += 1;
            }
        }
        check(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1, || {
            format!("class {class} fold sizes {per_fold:?}")
        })?;
    }
    let mut totals = vec![0usize; k];
    for &f in &folds {
        totals[f] += 1;
    }
    check(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1, || {
        format!("overall fold sizes {totals:?}")
    })
}

pub fn bundle_keys(bundle: &DatasetBundle) -> HashSet<IssueKey> {
    bundle
        .train
        .iter()
        .chain(&bundle.test)
        .chain(&bundle.ood)
        .map(|e| e.key())
        .collect()
}

// ---------------------------------------------------------------- gradients

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Five-point central difference of `f` at `x`.
fn derivative(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-3;
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

fn with(v: &[f64], j: usize, value: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    out[j] = value;
    out
}

/// Worst relative error between analytic gradients and finite differences
/// over random small problems.
pub fn gradient_check(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let dim = rng.random_range(2..=32);
        let n = rng.random_range(1..=16);
        let x: Vec<SparseVec> = (0..n)
            .map(|_| {
                let mut idx: Vec<u32> = (0..dim as u32).filter(|_| rng.random_bool(0.4)).collect();
                if idx.is_empty() {
                    idx.push(rng.random_range(0..dim as u32));
                }
                let values = idx.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
                SparseVec { indices: idx, values }
            })
            .collect();
        let sw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        if case % 2 == 0 {
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let loss = |w: &[f64], b: f64| binary_loss_and_gradient(w, b, &x, &y, &sw).0;
            let (_, g, gb) = binary_loss_and_gradient(&w, b, &x, &y, &sw);
            for j in 0..dim {
                worst = worst.max(relative_error(g[j], derivative(|v| loss(&with(&w, j, v), b), w[j])));
            }
            worst = worst.max(relative_error(gb, derivative(|v| loss(&w, v), b)));
        } else {
            let k = rng.random_range(2..=4);
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let w: Vec<f64> = (0..dim * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |w: &[f64], b: &[f64]| multiclass_loss_and_gradient(w, b, &x, &y, &sw).0;
            let (_, g, gb) = multiclass_loss_and_gradient(&w, &b, &x, &y, &sw);
            for j in 0..w.len() {
                worst = worst.max(relative_error(g[j], derivative(|v| loss(&with(&w, j, v), &b), w[j])));
            }
            for c in 0..k {
                worst = worst.max(relative_error(gb[c], derivative(|v| loss(&w, &with(&b, c, v)), b[c])));
            }
        }
    }
    worst
}
