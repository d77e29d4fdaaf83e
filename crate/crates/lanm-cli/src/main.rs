//! `lanm` — a command-line laboratory for identifiable latent additive-noise
//! models.
//!
//! Every run writes a self-contained directory: the fully resolved
//! configuration next to the outputs, fixed file names (`config.json`,
//! `manifest.json`, `log.csv`, `report.json`), and no timestamps or absolute
//! paths, so re-running a command with the same inputs reproduces the
//! directory bit for bit.
//!
//! Exit codes: `0` success, `2` configuration or usage errors, `3` I/O
//! errors, `4` numerical failures (non-finite values, failed factorization).
//! Assumption-check verdicts are findings, not failures: `lanm check`
//! exits `0` whenever the checks ran to completion.

mod commands;
mod traverse;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lanm", version, about = "Latent additive-noise model laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Override the configuration's seed list with a single seed
    /// (commands without a configuration use this directly; default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Experiment configuration JSON; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory for the run.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,

    /// Validate inputs and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Concurrent runs for multi-seed commands (default 1; the
    /// LANM_THREADS environment variable caps whatever is requested).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, or mix an ingested signal table.
    Gen {
        /// Ingest a day-keyed region-signal CSV instead of simulating.
        #[arg(long, value_name = "FILE")]
        fmri: Option<PathBuf>,
    },
    /// Train one model per configured seed on a saved dataset.
    Train {
        /// Dataset directory produced by `lanm gen`.
        dataset: PathBuf,
        /// Resume from a checkpoint directory (single seed only).
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a directory of seed-* checkpoints).
    Eval {
        /// Dataset directory produced by `lanm gen`.
        dataset: PathBuf,
        /// Checkpoint directory, or a parent holding seed-<s> checkpoints.
        checkpoint: PathBuf,
    },
    /// Sweep one latent of a checkpoint and tabulate the decoded response.
    Traverse {
        /// Checkpoint directory.
        checkpoint: PathBuf,
        /// 1-based latent node to intervene on.
        #[arg(long)]
        node: usize,
        /// Lower end of the intervention grid.
        #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
        lo: f64,
        /// Upper end of the intervention grid.
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        hi: f64,
        /// Number of grid points.
        #[arg(long, default_value_t = 21)]
        steps: usize,
    },
    /// Run the identifiability assumption checks on a dataset directory
    /// or on a configuration file (generating the data in memory).
    Check {
        /// Dataset directory, or an experiment configuration JSON.
        target: PathBuf,
    },
    /// Build the two-node counterexample: distinct latent models with
    /// bit-identical observations.
    Counterexample {
        /// Number of segments.
        #[arg(long, default_value_t = 5)]
        segments: usize,
        /// Samples per segment.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Freeze the invariant mechanism term to a constant, restoring
        /// affine equivalence between the pair's latents.
        #[arg(long)]
        mlp2_constant: bool,
    },
}

fn exit_code(err: &lanm::Error) -> i32 {
    match err {
        lanm::Error::Io { .. } => 3,
        lanm::Error::NonFinite(_) | lanm::Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = commands::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
