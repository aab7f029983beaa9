//! `specfed` command line: partition datasets, run training experiments and
//! grids, plot metrics, and verify the convergence bound.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 contraction-bound violation.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use specfed_cli::config::{key_docs, CliError, ExperimentConfig, KeyValues, Profile, Result};
use specfed_cli::{experiment, plot, theory_cmd};

fn config_keys_help() -> String {
    let mut s = String::from("Config file keys (flat key=value, `#` comments):\n");
    for (key, doc) in key_docs() {
        s.push_str(&format!("  {key:<26} {doc}\n"));
    }
    s.push_str(
        "\nGrid configs additionally accept grid.variants, grid.attacks,\n\
         grid.partitions, and grid.seeds as comma-separated lists.\n\
         SPECFED_OUT_ROOT, if set, prefixes relative --out paths.",
    );
    s
}

#[derive(Parser)]
#[command(name = "specfed", version, about = "Federated spectrogram-classifier simulator", after_long_help = config_keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and write partitioned client shards.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Run one federated training experiment.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Run a sweep over variants, attacks, partitions, and seeds; resumable.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Combine metrics CSVs into a deterministic SVG accuracy plot.
    Plot {
        /// Metrics CSV files produced by `train` or `grid`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the round-wise contraction bound on a synthetic federation.
    TheoryVerify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_kv(path: &Option<PathBuf>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

/// Relative --out paths may be rooted via SPECFED_OUT_ROOT.
fn resolve_out(out: PathBuf) -> PathBuf {
    if out.is_relative() {
        if let Ok(root) = std::env::var("SPECFED_OUT_ROOT") {
            return PathBuf::from(root).join(out);
        }
    }
    out
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Partition {
            config,
            out,
            seed,
            profile,
        } => {
            let cfg =
                ExperimentConfig::resolve(&load_kv(&config)?, Profile::parse(&profile)?, seed)?;
            let out = resolve_out(out);
            experiment::run_partition(&cfg, &out)?;
            println!("wrote shards to {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            out,
            seed,
            profile,
        } => {
            let cfg =
                ExperimentConfig::resolve(&load_kv(&config)?, Profile::parse(&profile)?, seed)?;
            let out = resolve_out(out);
            let metrics = experiment::run_experiment(&cfg, &out)?;
            println!("wrote {}", metrics.display());
            Ok(())
        }
        Command::Grid {
            config,
            out,
            profile,
        } => {
            let kv = KeyValues::load(&config)?;
            let out = resolve_out(out);
            let outcome = experiment::run_grid(&kv, Profile::parse(&profile)?, &out)?;
            println!(
                "grid: {} completed, {} skipped, {} failed",
                outcome.completed.len(),
                outcome.skipped.len(),
                outcome.failed.len()
            );
            if !outcome.failed.is_empty() {
                for (cell, err) in &outcome.failed {
                    eprintln!("cell {cell}: {err}");
                }
                return Err(CliError::Runtime(format!(
                    "{} grid cell(s) failed",
                    outcome.failed.len()
                )));
            }
            Ok(())
        }
        Command::Plot { inputs, out } => {
            let out = resolve_out(out);
            plot::plot_files(&inputs, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::TheoryVerify { config, out } => {
            let spec = theory_cmd::VerifySpec::resolve(&load_kv(&config)?)?;
            let out = resolve_out(out);
            let report = theory_cmd::verify_to_dir(&spec, &out)?;
            println!(
                "q = {:.6}, C' = {:.6e}, rounds = {}, all_pass = {}",
                report.q,
                report.c_prime,
                report.rounds.len(),
                report.all_pass
            );
            if !report.all_pass {
                return Err(CliError::BoundViolation);
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
