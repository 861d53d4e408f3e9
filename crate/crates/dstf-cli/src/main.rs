//! Experiment runner. Every command is deterministic under the config
//! seed: rerunning writes byte-identical artifacts. Progress goes to
//! stderr; artifact files carry no timestamps.

mod artifacts;
mod commands;
mod fetch;
mod report;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dstf", version, about = "Dual sparse training experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the dense baseline (pipeline stage 1)
    Train {
        config: PathBuf,
        /// Continue a partial baseline checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weight-sparsify: l1 induction, magnitude pruning, fine-tune (stages 1-2)
    Prune {
        config: PathBuf,
        /// Start from an existing pretrained checkpoint instead of stage 1
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Activation-sparsify a dense baseline with the configured regularizer
    Actsparse {
        config: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full dual pipeline: pretrain, weight-sparsify, activation-sparsify
    Dual {
        config: PathBuf,
        /// Start from a pretrained or weight-sparse checkpoint
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the baseline under each activation regularizer and tabulate
    CompareRegularizers {
        config: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep (alpha, beta) cells and select by accuracy floor then sparsity
    GridSearch {
        config: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer sparsity and skipped-multiplication tables for a checkpoint
    Report {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download and unpack the MNIST idx files
    Fetch {
        dir: PathBuf,
        #[arg(long, default_value = fetch::DEFAULT_BASE_URL)]
        base_url: String,
    },
}

/// 0 success, 2 config error, 3 data error, 4 stage/runtime failure.
fn exit_code(err: &dstf::Error) -> u8 {
    use dstf::Error as E;
    match err {
        E::Config(_) => 2,
        E::Data(_)
        | E::IdxBadMagic { .. }
        | E::IdxTruncated { .. }
        | E::IdxCountMismatch { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, resume, out } => commands::cmd_train(&config, resume, out),
        Cmd::Prune { config, from, out } => commands::cmd_prune(&config, from, out),
        Cmd::Actsparse { config, from, out } => commands::cmd_actsparse(&config, from, out),
        Cmd::Dual { config, from, out } => commands::cmd_dual(&config, from, out),
        Cmd::CompareRegularizers { config, from, out } => {
            commands::cmd_compare_regularizers(&config, from, out)
        }
        Cmd::GridSearch { config, from, out } => commands::cmd_grid_search(&config, from, out),
        Cmd::Report { config, checkpoint, out } => report::cmd_report(&config, &checkpoint, out),
        Cmd::Fetch { dir, base_url } => fetch::cmd_fetch(&dir, &base_url),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
