//! Single-binary pipeline: dataset synthesis, training, embedding export and
//! evaluation. Config files are flat INI-style sections parsed as TOML;
//! command-line flags override file values. All randomness flows from one
//! seed, so reruns with the same inputs produce identical artifacts.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use puembed_core::graph::GraphError;
use puembed_core::trainer::TrainError;

#[derive(Parser)]
#[command(name = "puembed", version, about = "Sentence-pair embeddings from partially labeled data")]
struct Cli {
    /// Log more (overridden by RUST_LOG when set)
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PU dataset plus its fully labeled population
    Synth {
        /// TOML file with a [synth] section
        #[arg(long)]
        spec: std::path::PathBuf,
        /// Output dataset (JSONL; kept labels by name, the rest null)
        #[arg(long)]
        out: std::path::PathBuf,
        /// Output population with every true label (JSONL)
        #[arg(long)]
        truth: std::path::PathBuf,
    },
    /// Train a dual encoder on a JSONL dataset
    Train {
        /// Dataset: one {"premise", "hypothesis", "label"} object per line
        #[arg(long)]
        data: std::path::PathBuf,
        /// TOML config with [train] and [model] sections
        #[arg(long)]
        config: Option<std::path::PathBuf>,
        /// Output directory (checkpoint/, history.csv, config.toml)
        #[arg(long)]
        out: std::path::PathBuf,
        /// Comma-separated per-class positive priors, overriding defaults
        #[arg(long)]
        priors: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Annealing exponent (>= 2)
        #[arg(long)]
        alpha: Option<f64>,
        /// Supervision mode: mono-label, multi-label or pu-only
        #[arg(long)]
        mode: Option<String>,
        /// Drop the unlabeled-risk term (supervised-only baseline)
        #[arg(long)]
        no_pu: bool,
        /// Apply the full unlabeled-risk weight from the first step
        #[arg(long)]
        no_anneal: bool,
    },
    /// Export sentence embeddings for one sentence per input line
    Embed {
        /// Training output directory or checkpoint directory
        #[arg(long)]
        model: std::path::PathBuf,
        #[arg(long)]
        input: std::path::PathBuf,
        /// Binary output: row-major little-endian f32, one row per line
        #[arg(long)]
        output: std::path::PathBuf,
        /// Optional tab-separated mirror of the same rows
        #[arg(long)]
        text_output: Option<std::path::PathBuf>,
    },
    /// Evaluate a trained model on scored or labeled pairs
    Eval {
        /// Training output directory or checkpoint directory
        #[arg(long)]
        model: std::path::PathBuf,
        /// JSONL with premise/hypothesis plus "score" (sts) or "label" (cls, probe)
        #[arg(long)]
        data: std::path::PathBuf,
        #[arg(long)]
        task: Task,
        /// Cross-validation folds for the probe task
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Fixed similarity threshold for cls; omitted means dev-split tuning
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    /// Spearman correlation of embedding cosines against graded scores
    Sts,
    /// Binary pair classification by cosine threshold
    Cls,
    /// Logistic-regression probe over pair matching features
    Probe,
}

/// Numeric failures exit 3; everything else that goes wrong is a usage or
/// configuration problem and exits 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(train) = cause.downcast_ref::<TrainError>() {
            if matches!(train, TrainError::NonFiniteGradient { .. }) {
                return 3;
            }
        }
        if let Some(graph) = cause.downcast_ref::<GraphError>() {
            if matches!(graph, GraphError::NonFinite { .. }) {
                return 3;
            }
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Synth { spec, out, truth } => commands::synth(&spec, &out, &truth),
        Command::Train {
            data,
            config,
            out,
            priors,
            seed,
            epochs,
            batch_size,
            learning_rate,
            alpha,
            mode,
            no_pu,
            no_anneal,
        } => commands::train(commands::TrainArgs {
            data,
            config,
            out,
            priors,
            seed,
            epochs,
            batch_size,
            learning_rate,
            alpha,
            mode,
            no_pu,
            no_anneal,
        }),
        Command::Embed {
            model,
            input,
            output,
            text_output,
        } => commands::embed(&model, &input, &output, text_output.as_deref()),
        Command::Eval {
            model,
            data,
            task,
            folds,
            threshold,
        } => match task {
            Task::Sts => commands::eval_sts(&model, &data),
            Task::Cls => commands::eval_cls(&model, &data, threshold),
            Task::Probe => commands::eval_probe(&model, &data, folds),
        },
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
