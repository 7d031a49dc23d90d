use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand};
use debtlens_core::corpus::Task;
use debtlens_core::ingest::parse_timestamp;
use debtlens_core::pipeline::{self, PipelineError, RunConfig, Stage};
use debtlens_core::synth;
use tracing_subscriber::EnvFilter;

/// Mine GitHub Archive issues, curate technical-debt datasets, and train and
/// evaluate TD classifiers.
#[derive(Debug, Parser)]
#[command(name = "debtlens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Archives (.json.gz or directories of them) to issues.jsonl.
    Mine(RunArgs),
    /// issues.jsonl to balanced TD, per-category and multiclass datasets
    /// plus ground_truth.jsonl.
    Curate(RunArgs),
    /// Datasets to bundles with OOD, train/test and fold assignments.
    Split(RunArgs),
    /// Bundles to baseline models and cross-validation reports.
    TrainBaseline(RunArgs),
    /// Score bundles' test and OOD splits with the models in --model-dir.
    Evaluate(RunArgs),
    /// TD plus per-category verdicts for a JSONL file of texts.
    Ensemble(RunArgs),
    /// Recall of the models in --model-dir on ground_truth.jsonl.
    GroundTruthEval(RunArgs),
    /// Write the synthetic archive used by the fixture tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Input files or directories. Repeatable.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.85)]
    ratio: f64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    ood_top_n: usize,
    #[arg(long, default_value_t = 30)]
    min_len: usize,
    /// Temporal split: train before, test from this instant.
    #[arg(long, value_parser = timestamp)]
    cutoff: Option<DateTime<Utc>>,
    /// Keep issues created at or after this instant (mine).
    #[arg(long, value_parser = timestamp)]
    since: Option<DateTime<Utc>>,
    /// Keep issues created before this instant (mine).
    #[arg(long, value_parser = timestamp)]
    until: Option<DateTime<Utc>>,
    /// Restrict to tasks: td, multiclass or a category name. Repeatable.
    #[arg(long = "category")]
    categories: Vec<Task>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

fn timestamp(text: &str) -> Result<DateTime<Utc>, String> {
    if let Ok(day) = NaiveDate::parse_from_str(text, "%Y-%m-%d") {
        return Ok(day.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
    }
    parse_timestamp(text).ok_or_else(|| format!("not a date or RFC 3339 timestamp: {text}"))
}

impl From<RunArgs> for RunConfig {
    fn from(a: RunArgs) -> Self {
        RunConfig {
            inputs: a.input,
            out: a.out,
            seed: a.seed,
            ratio: a.ratio,
            k: a.k,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            threshold: a.threshold,
            ood_top_n: a.ood_top_n,
            min_len: a.min_len,
            cutoff: a.cutoff,
            since: a.since,
            until: a.until,
            tasks: a.categories,
            model_dir: a.model_dir,
        }
    }
}

fn error_line(err: &PipelineError) -> String {
    let mut v = serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
    });
    if let Some(path) = err.path() {
        v["path"] = serde_json::json!(path.display().to_string());
    }
    v.to_string()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("DEBTLENS_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Mine(a) => (Stage::Mine, a),
        Command::Curate(a) => (Stage::Curate, a),
        Command::Split(a) => (Stage::Split, a),
        Command::TrainBaseline(a) => (Stage::TrainBaseline, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
        Command::Ensemble(a) => (Stage::Ensemble, a),
        Command::GroundTruthEval(a) => (Stage::GroundTruthEval, a),
        Command::Synth { out, seed } => {
            return match synth::write_fixture(&out, seed) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    let err = PipelineError::Io { path: out, cause: e };
                    eprintln!("{}", error_line(&err));
                    ExitCode::FAILURE
                }
            };
        }
    };
    match pipeline::run(stage, &args.into()) {
        Ok(manifest) => {
            println!("{}", pipeline::manifest_path(&manifest.config.out, stage).display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
