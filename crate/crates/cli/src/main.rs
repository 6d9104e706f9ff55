//! `adaptgen` command-line driver.

mod commands;
mod lock;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "adaptgen", version, about = "Prompt-conditioned LoRA adapter generation")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set run.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root; falls back to $ADAPTGEN_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Explicit run directory instead of `<out>/<name>-<config hash>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baselines {
    None,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build task datasets and write them as JSONL.
    Corpus,
    /// Pretrain the backbone and collect per-task checkpoints.
    CollectZoo,
    /// Train the parameter generator on the protocol's training tasks.
    TrainGenerator {
        /// Validate the spec and pairing, train zero steps.
        #[arg(long)]
        dry_run: bool,
        /// Continue from the saved generator state.
        #[arg(long)]
        resume: bool,
    },
    /// Generate one adapter for a task from a sampled prompt batch.
    Generate {
        #[arg(long)]
        task: String,
        /// Inference draw index (selects the prompt batch).
        #[arg(long, default_value_t = 0)]
        draw: u64,
    },
    /// Evaluate the trained generator on the protocol's test tasks.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Baselines::None)]
        baselines: Baselines,
    },
    /// Aggregate evaluation reports of several run directories.
    Report {
        #[arg(long = "runs", num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Where aggregate.json and aggregate.csv go.
        #[arg(long)]
        dest: PathBuf,
    },
    /// Project zoo and generated adapters to 2-D and write a plot and CSV.
    WeightMap,
    /// Time one generation against the full tuning recipe.
    Efficiency {
        #[arg(long)]
        task: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            // a closed pipe downstream is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
