//! Command-line driver: corpus generation, training, unlearning sweeps,
//! evaluation and report aggregation.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad configuration, 3 training
//! diverged, 4 unknown topic, 5 missing baseline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "unlearnlab",
    version,
    about = "Codebook seq2seq training and zero-shot topic unlearning"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, default_value = "unlearnlab.toml")]
    config: PathBuf,
    /// Output directory; overrides the config and the UNLEARNLAB_OUT_DIR variable.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads. Every pipeline runs on one thread, so results are
    /// deterministic for any value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or ingest) the parallel corpus and its splits.
    GenCorpus,
    /// Train the codebook model; writes init and best checkpoints.
    Train,
    /// Run an S' sweep of zero-shot unlearning for one topic word.
    Unlearn {
        #[arg(long)]
        topic: String,
        /// Comma-separated S' values; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        sprime: Option<Vec<usize>>,
        /// Use the topic prompts themselves as the control set.
        #[arg(long)]
        no_replacement: bool,
    },
    /// Score a checkpoint on a topic's evaluation sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// datasets.json written by `unlearn`.
        #[arg(long)]
        datasets: PathBuf,
        /// baselines.json; defaults to the file next to the datasets.
        #[arg(long)]
        baselines: Option<PathBuf>,
        /// Where to write the CSV; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Collect every topic's sweep into one CSV and print a summary.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(
        &cli.config,
        cli.out_dir.as_deref(),
        cli.threads,
        &cli.command,
    ) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
