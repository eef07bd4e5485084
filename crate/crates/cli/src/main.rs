//! `dora`: train adapters on toy tasks, analyze magnitude/direction drift,
//! merge adapters into dense weights, and verify gradients.
//!
//! Exit codes: 0 success, 1 failed check or run, 2 usage or config error,
//! 3 I/O error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use dora_core::adapters::Variant;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dora", version, about = "Weight-decomposed low-rank adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a toy task; writes checkpoints, loss.csv and manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides $DORA_OUT_DIR and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute per-layer magnitude/direction drift against W0.
    Analyze {
        /// Checkpoint supplying W0 (e.g. a run's step-000000 file).
        w0: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Output prefix; writes PREFIX.csv and PREFIX.json.
        #[arg(long)]
        out: PathBuf,
        /// Regex selecting layer names.
        #[arg(long)]
        pattern: Option<String>,
        /// Run config to take `pattern` from.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fold adapters into dense weights and verify the forward pass.
    Merge {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the random probe inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-check tape, closed-form and finite-difference gradients.
    Gradcheck {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        /// `d,k,r`
        #[arg(long, value_parser = parse_dims, default_value = "5,4,2")]
        dims: (usize, usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: dora_core::adapters::ParseVariantError| e.to_string())
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [d, k, r] if d > 0 && k > 0 && r > 0 => Ok((d, k, r)),
        _ => Err("expected three positive integers d,k,r".into()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seed } => commands::cmd_train(&config, out, seed),
        Command::Analyze {
            w0,
            checkpoints,
            out,
            pattern,
            config,
        } => commands::cmd_analyze(&w0, &checkpoints, &out, pattern, config.as_deref()),
        Command::Merge { checkpoint, out, seed } => commands::cmd_merge(&checkpoint, &out, seed),
        Command::Gradcheck { variant, dims, seed } => commands::cmd_gradcheck(variant, dims, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let is_train = matches!(cli.command, Command::Train { .. });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_train && matches!(e, CliError::Config(_)) {
                let mut cmd = Cli::command();
                cmd.build();
                if let Some(train) = cmd.find_subcommand_mut("train") {
                    eprintln!("\n{}", train.render_usage());
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
