#![cfg(feature = "onnx")]

use std::fs;
use std::path::{Path, PathBuf};

use debtlens_core::classifier::export::{MAX_TOKENS, PARITY_TOLERANCE};
use debtlens_core::classifier::{load_exported_model, Head, LoadError, TextClassifier};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/exports").join(name)
}

fn copy_fixture(name: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture(name)).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

#[test]
fn binary_export_matches_parity_fixture() {
    let model = load_exported_model(&fixture("td")).unwrap();
    assert_eq!(model.head(), Head::Binary);
    assert!(model.parity_max_delta <= PARITY_TOLERANCE);
    assert_eq!(model.card.task, "td");

    let parity = fs::read_to_string(fixture("td").join("parity.jsonl")).unwrap();
    assert_eq!(parity.lines().count(), 64);
    for line in parity.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let s = model.score(v["text"].as_str().unwrap()).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert!((s - v["score"].as_f64().unwrap()).abs() <= 1e-3);
    }
    assert!(model.score_multi("x").is_err());
}

#[test]
fn multiclass_export_exposes_score_multi() {
    let model = load_exported_model(&fixture("multiclass")).unwrap();
    let Head::Multiclass(labels) = model.head() else { panic!("expected multiclass head") };
    assert_eq!(labels.len(), 13);
    assert_eq!(labels[0], "Architecture");
    let p = model.score_multi("flaky test coverage").unwrap();
    assert_eq!(p.len(), 13);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(p.iter().all(|&v| v >= 0.0));
    assert!(model.score("x").is_err());
}

#[test]
fn scoring_is_deterministic_and_truncates_head_first() {
    let model = load_exported_model(&fixture("td")).unwrap();
    let text = "refactor the legacy module";
    assert_eq!(model.score(text).unwrap(), model.score(text).unwrap());

    let long = vec!["debt"; 2000].join(" ");
    let ids = model.token_ids(&long).unwrap();
    assert_eq!(ids.len(), MAX_TOKENS);
    // Tokens past the limit do not change the score.
    let longer = format!("{long} crash memory leak parser");
    assert_eq!(model.score(&long).unwrap(), model.score(&longer).unwrap());
}

#[test]
fn wrong_output_width_is_a_shape_error() {
    let err = load_exported_model(&fixture("bad_head")).unwrap_err();
    assert!(matches!(err, LoadError::Shape { .. }), "{err}");
}

#[test]
fn missing_items_are_named() {
    for (file, item) in [
        ("tokenizer.json", "tokenizer"),
        ("model.onnx", "graph"),
        ("parity.jsonl", "parity"),
        ("card.json", "card"),
    ] {
        let dir = copy_fixture("td");
        fs::remove_file(dir.path().join(file)).unwrap();
        match load_exported_model(dir.path()).unwrap_err() {
            LoadError::Missing { item: got, path } => {
                assert_eq!(got, item);
                assert!(path.ends_with(file));
            }
            other => panic!("{file}: unexpected {other}"),
        }
    }
    assert!(matches!(
        load_exported_model(Path::new("/nonexistent/export")),
        Err(LoadError::Missing { item: "export directory", .. })
    ));
}

#[test]
fn truncated_graph_fails_to_load() {
    let dir = copy_fixture("td");
    let graph = dir.path().join("model.onnx");
    let bytes = fs::read(&graph).unwrap();
    fs::write(&graph, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_exported_model(dir.path()), Err(LoadError::Graph { .. })));
}

#[test]
fn broken_tokenizer_fails_to_load() {
    let dir = copy_fixture("td");
    fs::write(dir.path().join("tokenizer.json"), "{\"not\": \"a tokenizer\"}").unwrap();
    assert!(matches!(load_exported_model(dir.path()), Err(LoadError::Tokenizer { .. })));
}

#[test]
fn parity_drift_is_refused() {
    let dir = copy_fixture("td");
    let path = dir.path().join("parity.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[5]).unwrap();
    let s = v["score"].as_f64().unwrap();
    v["score"] = serde_json::json!(if s > 0.5 { s - 0.01 } else { s + 0.01 });
    lines[5] = v.to_string();
    fs::write(&path, lines.join("\n")).unwrap();
    match load_exported_model(dir.path()).unwrap_err() {
        LoadError::Parity { index, delta, .. } => {
            assert_eq!(index, 5);
            assert!((delta - 0.01).abs() < 1e-3);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn parity_entries_must_match_head() {
    let dir = copy_fixture("td");
    fs::write(dir.path().join("parity.jsonl"), "{\"text\": \"debt\", \"scores\": [0.1, 0.9]}\n").unwrap();
    assert!(matches!(load_exported_model(dir.path()), Err(LoadError::ParityFixture { .. })));
    fs::write(dir.path().join("parity.jsonl"), "").unwrap();
    assert!(matches!(load_exported_model(dir.path()), Err(LoadError::ParityFixture { .. })));
}
