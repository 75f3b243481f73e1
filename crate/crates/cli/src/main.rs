//! `formtree`: generate corpora, train, predict, decode score matrices,
//! evaluate and inspect.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Mode, Precision, Route};

#[derive(Parser, Debug)]
#[command(name = "formtree", version, about = "Form structure extraction as typed parent prediction")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for prediction and evaluation (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled corpus.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a JSONL metrics log.
    Train(TrainArgs),
    /// Predict forests for every document of a corpus.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Decode a score matrix and type matrix into a forest, without a model.
    Decode(DecodeArgs),
    /// Dump scores, proposals, levels and masks of one document.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_ckpt: Option<PathBuf>,
    /// Metrics log; defaults to the checkpoint path plus `.metrics.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Hold out this many documents from the end of the corpus for evaluation.
    #[arg(long)]
    test_docs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for one Graphviz file per document.
    #[arg(long)]
    dot: Option<PathBuf>,
    #[arg(long, value_enum)]
    route: Option<Route>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// JSON object with `R` (N x N scores, R[i][j] for parent i of child j),
    /// `C` (N x N relation ids or names) and an optional `schema`.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    score_mode: Option<Mode>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Document index or id.
    #[arg(long)]
    doc: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<config::Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
