//! `mivc`: generate bags, pool, train, evaluate, benchmark, count
//! parameters and check gradients.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage, 3 data. Failures print
//! one JSON line to stderr: `{"error":"usage","message":"..."}`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mivc::model::{OptimizerKind, Strategy};

#[derive(Debug, Parser)]
#[command(name = "mivc", version, about = "Multiple-instance pooling of embedding bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic witness task as a train/eval dataset.
    Gen(GenArgs),
    /// Pool one bag and write the fused embedding as JSON.
    Pool(PoolArgs),
    /// Train a model on a manifest and write its artifacts.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and score every strategy with identical settings.
    Bench(BenchArgs),
    /// Report parameter counts for a strategy.
    Params(ParamsArgs),
    /// Compare analytic pooling gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by config-driven commands; flags win over the file.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration (keys: model, synthetic, train_manifest,
    /// eval_manifest, out, strategies).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; re-runs overwrite atomically.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single source of randomness for data and model.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training overrides.
#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    /// Aggregation strategy: single, concat-grid, concat-embed, avg, max, attn, gated.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Passes over the training split.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (>= 0).
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Bags per update.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Attention hidden width K.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// sgd or adam.
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(format!("unknown optimizer {other:?} (sgd, adam)")),
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of bags across both splits.
    #[arg(long)]
    pub n_bags: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Embedding file (.mivc) or delimited text (.csv, .tsv), one instance per row.
    #[arg(long)]
    pub input: PathBuf,
    /// avg, max, attn or gated.
    #[arg(long)]
    pub kind: mivc::PoolingKind,
    /// Checkpoint whose pooling parameters to use (attn, gated).
    #[arg(long, conflicts_with = "random_init")]
    pub params: Option<PathBuf>,
    /// Draw attention parameters from --seed instead of a checkpoint.
    #[arg(long, requires = "seed")]
    pub random_init: bool,
    /// Seed for --random-init.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden width K for --random-init.
    #[arg(long, default_value_t = mivc::pooling::DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// Field delimiter for text input; defaults to tab for .tsv, comma otherwise.
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Training manifest (JSON lines).
    #[arg(long = "train")]
    pub train_manifest: Option<PathBuf>,
    /// Optional held-out manifest for metrics and attention export.
    #[arg(long = "eval")]
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for metrics.json (and attention.jsonl for attention models).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Training manifest; the synthetic task is generated when absent.
    #[arg(long = "train", requires = "eval_manifest")]
    pub train_manifest: Option<PathBuf>,
    /// Evaluation manifest; needs --train.
    #[arg(long = "eval", requires = "train_manifest")]
    pub eval_manifest: Option<PathBuf>,
    /// Comma-separated strategies, in row order.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    /// Bag count when generating the synthetic task.
    #[arg(long)]
    pub n_bags: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Strategy or pooling kind.
    #[arg(long)]
    pub kind: Strategy,
    /// Attention hidden width.
    #[arg(long = "K", default_value_t = mivc::pooling::DEFAULT_HIDDEN)]
    pub k: usize,
    /// Embedding dimension.
    #[arg(long = "M")]
    pub m: usize,
    /// Classes in the linear head.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// attn, gated or all.
    #[arg(long, default_value = "all")]
    pub kind: String,
    /// Random cases per kind.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Seed for the random cases.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control: corrupt the analytic gradient, which must fail.
    #[arg(long)]
    pub inject_fault: bool,
}

/// Command outcome beyond plain success.
pub enum Outcome {
    Ok,
    CheckFailed,
}

fn fail(class: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": class, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments");
            return fail("usage", 2, first.trim_start_matches("error: "));
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Pool(a) => commands::pool(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Params(a) => commands::params(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) if e.is_usage() => fail("usage", 2, &e.to_string()),
        Err(e) => fail("data", 3, &e.to_string()),
    }
}
