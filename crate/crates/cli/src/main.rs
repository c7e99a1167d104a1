use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sparse_adapter_cli::commands::{self, resolve_out};
use sparse_adapter_cli::sweep::{cmd_sweep, sweep_points, SweepAxis, SweepOptions, DEFAULT_SEEDS};
use sparse_adapter_cli::ExperimentConfig;

/// Exit status for a run that hit non-finite values.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "sparseadapter", version, about = "Prune adapters at initialization and train them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Mask file for `train`, or the file to read for `inspect-mask`.
    #[arg(long, global = true)]
    mask: Option<PathBuf>,
    /// Output directory; SPARSEADAPTER_OUT takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the run seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true, value_parser = ["sparsity", "method", "large-sparse"])]
    sweep_axis: Option<String>,
    /// Comma-separated axis values, e.g. `0.2,0.4,0.6`.
    #[arg(long, global = true)]
    values: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Score adapters and write a mask file.
    Prune,
    /// Train adapters, optionally under a mask.
    Train,
    /// Run a grid of training runs and write an aggregate CSV.
    Sweep {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        /// Eval accuracy used for the steps-to-threshold columns.
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
    },
    /// Evaluate the checkpoint in the output directory.
    Eval,
    /// Print a mask file's contents.
    InspectMask,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config is required")?;
    let cfg = ExperimentConfig::from_path(path)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::InspectMask => {
            let path = cli.mask.as_ref().context("--mask is required")?;
            println!("{}", commands::cmd_inspect_mask(path)?);
        }
        Command::Prune => {
            let cfg = load_config(cli)?;
            let out = resolve_out(cli.out.as_deref(), &cfg);
            println!("{}", commands::cmd_prune(&cfg, &out)?);
            println!("wrote {}", out.join(commands::MASK_FILE).display());
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let out = resolve_out(cli.out.as_deref(), &cfg);
            println!("{}", commands::cmd_train(&cfg, cli.mask.as_deref(), &out)?);
        }
        Command::Eval => {
            let cfg = load_config(cli)?;
            let out = resolve_out(cli.out.as_deref(), &cfg);
            let r = commands::cmd_eval(&cfg, &out)?;
            println!("eval loss {:.6}  accuracy {:.4}  on {} examples", r.loss, r.accuracy, r.n_examples);
        }
        Command::Sweep { seeds, threshold } => {
            let cfg = load_config(cli)?;
            let out = resolve_out(cli.out.as_deref(), &cfg);
            let axis: SweepAxis = cli.sweep_axis.as_deref().context("--sweep-axis is required")?.parse()?;
            let values = cli.values.as_deref().context("--values is required")?;
            let points = sweep_points(&cfg, axis, values)?;
            let opts = SweepOptions { n_seeds: *seeds, workers: cli.workers, threshold: *threshold };
            let rows = cmd_sweep(&cfg, &points, &opts, &out)?;
            println!("{}", sparse_adapter_cli::sweep::SWEEP_HEADER);
            for row in rows {
                println!("{}", row.to_csv());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(sparse_adapter::Error::Divergence { .. })));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { 1 })
        }
    }
}
