use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod ablate;
mod commands;

/// Sparse continual learning engine: dataset generation, pretraining,
/// class-incremental runs, ablation grids, and self-verification.
#[derive(Parser)]
#[command(name = "spcl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic universe and write it as CSVs plus a manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the dual tower and write a checkpoint plus the frozen-baseline record.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the pretraining seed (defaults to the first run seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the class-incremental sequence and write metrics JSONL plus final checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the run to a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Baseline override: "sparse" or "full-finetune-er".
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Run an ablation preset or grid and write one aggregate table per axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for independent runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle suite: gradient checks, top-k, dense equivalence, reservoir.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

// Exit codes: 0 success, 1 config error, 2 runtime error, 3 oracle failure.
fn exit_code_for(err: &spcl_core::SpclError) -> u8 {
    use spcl_core::SpclError::*;
    match err {
        Config(_) | Schema(_) | Parse { .. } | Argument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, out, seed } => commands::cmd_gen(&config, &out, seed),
        Command::Pretrain { config, out, seed } => commands::cmd_pretrain(&config, &out, seed),
        Command::Run { config, out, seed, baseline } => {
            commands::cmd_run(&config, &out, seed, baseline.as_deref())
        }
        Command::Ablate { config, out, workers, seed } => {
            ablate::cmd_ablate(&config, &out, workers, seed)
        }
        Command::Gradcheck { seed } => {
            return match commands::cmd_gradcheck(seed) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(3),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code_for(&e))
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
