//! `cie`: train, calibrate, run and evaluate the extraction pipeline.
//!
//! Global options come before the subcommand and override keys of the
//! `--config` file. Failures print one JSON line on stderr,
//! `{"error": KIND, "message": TEXT}`, and exit with status 1 (2 for usage
//! errors).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cie_core::relation::RelationMode;

#[derive(Debug, Parser)]
#[command(
    name = "cie",
    version,
    about = "Closed information extraction over a knowledge graph"
)]
pub struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from the synthetic-corpus preset instead of the defaults.
    #[arg(long)]
    pub synthetic_preset: bool,
    /// Model initialization seed (`seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Knowledge-graph directory (`paths.kb_dir`).
    #[arg(long, value_name = "DIR")]
    pub kb_dir: Option<PathBuf>,
    /// Training split (`paths.train`).
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Development split (`paths.dev`).
    #[arg(long, value_name = "FILE")]
    pub dev: Option<PathBuf>,
    /// Test split (`paths.test`).
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Checkpoint directory (`paths.model_dir`).
    #[arg(long, value_name = "DIR")]
    pub model_dir: Option<PathBuf>,
    /// Thresholds file (`paths.thresholds`).
    #[arg(long, value_name = "FILE")]
    pub thresholds: Option<PathBuf>,
    /// Candidates per mention (`pipeline.top_k`).
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage and write its checkpoint into the model directory.
    Train {
        #[command(subcommand)]
        stage: Stage,
    },
    /// Tune the three thresholds on the dev split.
    Calibrate(CalibrateArgs),
    /// Extract triples from a JSON-lines file of documents.
    Extract(ExtractArgs),
    /// Score a predictions file against gold documents.
    Evaluate(EvaluateArgs),
    /// Compare relation-extractor variants over shared upstream stages.
    Ablate(AblateArgs),
    /// Measure extraction throughput in seconds per 1000 documents.
    Bench(BenchArgs),
    /// Generate a synthetic knowledge graph and corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Stage {
    Mention {
        #[command(flatten)]
        train: TrainArgs,
        /// Longest span scored; 0 scores every span.
        #[arg(long)]
        max_span_len: Option<usize>,
    },
    Biencoder {
        #[command(flatten)]
        train: TrainArgs,
        /// Hard negatives mined per mention.
        #[arg(long)]
        gamma: Option<usize>,
        /// First epoch that uses hard negatives.
        #[arg(long)]
        beta: Option<usize>,
    },
    Crossencoder {
        #[command(flatten)]
        train: TrainArgs,
        /// Negatives ranked against each gold entity.
        #[arg(long)]
        rank_negatives: Option<usize>,
    },
    Relation {
        #[command(flatten)]
        train: TrainArgs,
        /// full, no_types, no_desc, types_only or coarse.
        #[arg(long)]
        mode: Option<RelationMode>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Micro,
    Macro,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// F-beta objective (`calibration.beta`).
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Where to write the thresholds; defaults to `paths.thresholds`.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// One document per line with `doc_id` and `tokens` (or `text`).
    #[arg(long, value_name = "JSONL")]
    pub input: PathBuf,
    /// Predictions, one `{"doc_id", "triples"}` object per line.
    #[arg(long, value_name = "JSONL")]
    pub output: PathBuf,
    #[arg(long)]
    pub epsilon_m: Option<f64>,
    #[arg(long)]
    pub epsilon_c: Option<f64>,
    #[arg(long)]
    pub epsilon_r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "JSONL")]
    pub predictions: PathBuf,
    /// Gold documents; defaults to `paths.test`.
    #[arg(long, value_name = "JSONL")]
    pub gold: Option<PathBuf>,
    /// Relation training counts as a JSON map; defaults to counting
    /// `paths.train` when it is set.
    #[arg(long, value_name = "FILE")]
    pub frequencies: Option<PathBuf>,
    /// Also attribute missed gold triples to stages (needs the models).
    #[arg(long)]
    pub attribution: bool,
    /// Report directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Seeds to average over; defaults to `seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Relation modes to compare; defaults to `ablation.modes`.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<RelationMode>,
    /// Train relation extractors whose checkpoints are missing.
    #[arg(long)]
    pub train_missing: bool,
    /// Ablation table; defaults to `model_dir/ablation.json`.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Documents to extract from; defaults to `paths.test`.
    #[arg(long, value_name = "JSONL")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    /// Also write the measurements as JSON.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub types: Option<usize>,
    #[arg(long)]
    pub determinism: Option<f64>,
    #[arg(long)]
    pub train_docs: Option<usize>,
    #[arg(long)]
    pub dev_docs: Option<usize>,
    #[arg(long)]
    pub test_docs: Option<usize>,
    /// Generation seed.
    #[arg(long = "synth-seed")]
    pub synth_seed: Option<u64>,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use cie_core::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. }) => "io",
        Some(Error::Parse { .. }) => "parse",
        Some(Error::Validation(_)) => "validation",
        Some(Error::Checkpoint(_)) => "checkpoint",
        Some(Error::MissingKey(_)) => "missing_key",
        Some(Error::Json(_)) => "json",
        None => "error",
    }
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.split_whitespace().collect::<Vec<_>>().join(" ") });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
