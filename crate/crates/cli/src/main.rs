//! Command-line front end: `search`, `train`, `eval`, `export-dist`,
//! `space`.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numerical abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use augarch::Error;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "augarch",
    about = "Joint gradient-based search of augmentation policies and cell architectures",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set search.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the joint policy + architecture search.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Master seed; every random stream derives from it.
        #[arg(long)]
        seed: u64,
        /// Output directory (default: runs/<timestamp>-search).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a derived genotype + policy and report test metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained weights archive on the held-out split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seed used to re-derive the dataset split (default 0).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Regenerate policy_dist.csv from a search output directory.
    ExportDist {
        /// Search output directory (or a policy_z_log.csv path).
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report search-space sizes.
    Space {
        /// Total nodes per cell.
        #[arg(long)]
        nodes: usize,
        /// Candidate operations per edge.
        #[arg(long)]
        ops: usize,
        /// Sub-policies (L).
        #[arg(long, default_value_t = 10)]
        sub_policies: usize,
        /// Stages per sub-policy (K).
        #[arg(long, default_value_t = 2)]
        stages: usize,
        /// Augmentation operations (#O).
        #[arg(long, default_value_t = 16)]
        aug_ops: usize,
        /// Also print the cited reference magnitudes.
        #[arg(long)]
        cite: bool,
    },
}

fn run(cli: Cli) -> augarch::Result<()> {
    match cli.command {
        Command::Search { cfg, seed, out, resume } => {
            let cfg = RunConfig::load(cfg.config.as_deref(), &cfg.set)?;
            let out = out.unwrap_or_else(|| commands::timestamped_dir("search"));
            commands::cmd_search(&cfg, seed, &out, resume.as_deref())
        }
        Command::Train { cfg, seed, genotype, policy, out } => {
            let cfg = RunConfig::load(cfg.config.as_deref(), &cfg.set)?;
            let out = out.unwrap_or_else(|| commands::timestamped_dir("train"));
            commands::cmd_train(&cfg, seed, &genotype, &policy, &out)
        }
        Command::Eval { cfg, seed, weights } => {
            let cfg = RunConfig::load(cfg.config.as_deref(), &cfg.set)?;
            commands::cmd_eval(&cfg, seed, &weights)
        }
        Command::ExportDist { log, out } => commands::cmd_export_dist(&log, out.as_deref()),
        Command::Space { nodes, ops, sub_policies, stages, aug_ops, cite } => {
            commands::cmd_space(nodes, ops, sub_policies, stages, aug_ops, cite)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
