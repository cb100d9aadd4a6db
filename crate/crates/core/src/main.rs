use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latforge::cli::{self, atomic_write, CliError, ExperimentConfig};

/// Latent adversarial training experiments on small transformer language models.
#[derive(Parser)]
#[command(name = "latforge", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset splits and their hash manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to `data.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes metrics.csv and checkpoints into the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (defaults to `train.out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a metrics CSV row.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated splits to evaluate (defaults to the evaluation splits).
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<String>>,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Few-shot re-learning attack against an unlearned checkpoint.
    Relearn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG charts (one per metric family) from a metrics CSV.
    Plot {
        /// Metrics CSV written by `train`.
        csv: PathBuf,
        /// Output directory (defaults to the CSV's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("LATFORGE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("LATFORGE_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

fn run(args: Args) -> Result<(), CliError> {
    configure_threads()?;
    match args.command {
        Command::GenData { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config, seed)?;
            print!("{}", cli::cmd_gen_data(&cfg, out.as_deref())?);
        }
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let cfg = ExperimentConfig::load(&config, seed)?;
            let outcome = cli::cmd_train(&cfg, out.as_deref(), resume.as_deref())?;
            eprintln!(
                "trained to step {} ({} skipped steps); outputs in {}",
                outcome.state.step,
                outcome.state.nan_skips,
                outcome.out_dir.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
            splits,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config, seed)?;
            let (_, csv) = cli::cmd_eval(&cfg, &checkpoint, splits.as_deref())?;
            if let Some(p) = out {
                atomic_write(&p, csv.as_bytes())?;
            }
            print!("{csv}");
        }
        Command::Relearn {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config, seed)?;
            let summary = cli::cmd_relearn(&cfg, &checkpoint)?;
            if let Some(p) = out {
                atomic_write(&p, summary.text.as_bytes())?;
            }
            print!("{}", summary.text);
        }
        Command::Plot { csv, out } => {
            for p in cli::cmd_plot(&csv, out.as_deref())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("latforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
