use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod rundir;

use commands::{Axis, EmbedSource, Method};
use config::{Overrides, RunConfig};

/// Few-shot node classification with virtual node tuning.
#[derive(Parser)]
#[command(name = "vnt", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dataset directory; falls back to VNT_DATA_ROOT.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the graph transformer on the label-free pretexts.
    Pretrain,
    /// Run VNT on every evaluation task and store per-task records.
    Tune {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Tune prompts on M source tasks and store them as a dictionary.
    BuildDict,
    /// Train the GPPE module against a dictionary.
    TrainGppe,
    /// Evaluate a method over the configured task set.
    Eval {
        #[arg(long, value_enum, default_value = "vnt")]
        method: Method,
        /// Tune the encoder together with the prompt (ablation).
        #[arg(long)]
        ablate_unfreeze: bool,
    },
    /// Evaluate over a list of values of one hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Write final-layer embeddings of the evaluation-class nodes.
    ExportEmbeddings {
        #[arg(long, value_enum, default_value = "frozen")]
        source: EmbedSource,
        #[arg(long, default_value_t = 256)]
        chunk: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        workers: cli.workers,
        dataset: cli.dataset,
    };
    let config = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()?;
    }
    match cli.command {
        Command::Pretrain => commands::cmd_pretrain(&config),
        Command::Tune { limit } => commands::cmd_tune(&config, limit),
        Command::BuildDict => commands::cmd_build_dict(&config),
        Command::TrainGppe => commands::cmd_train_gppe(&config),
        Command::Eval {
            method,
            ablate_unfreeze,
        } => commands::cmd_eval(&config, method, ablate_unfreeze),
        Command::Sweep { axis } => commands::cmd_sweep(&config, axis),
        Command::ExportEmbeddings { source, chunk } => commands::cmd_export_embeddings(&config, source, chunk),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
