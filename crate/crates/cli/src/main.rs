//! Single executable driving the full pipeline:
//! train -> prune -> search -> sample -> sweep -> eval -> report.
//!
//! Exit codes: 0 success, 2 config/input error, 3 runtime numerical error
//! (NaN/Inf detected). The last stdout line of every run is a one-line JSON
//! record of the outcome.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crprune_core::error::Error;

use commands::{
    cmd_dataset_dump, cmd_eval, cmd_prune, cmd_report, cmd_sample, cmd_search, cmd_sweep,
    cmd_train, DatasetArgs, EvalArgs, PruneArgs, ReportArgs, SampleArgs, SearchArgs, SweepArgs,
};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "crprune", version, about = "Cross-resolution pruning laboratory for a toy diffusion model")]
struct Cli {
    /// JSON config file; defaults apply when omitted. Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and write a checkpoint plus the loss curve.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the existing checkpoint instead of a fresh model.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a block-wise magnitude mask from a checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Uniform ratio for all three stages.
        #[arg(long, conflicts_with_all = ["r_down", "r_mid", "r_up"])]
        uniform: Option<f64>,
        #[arg(long, requires_all = ["r_mid", "r_up"])]
        r_down: Option<f64>,
        #[arg(long)]
        r_mid: Option<f64>,
        #[arg(long)]
        r_up: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated-annealing search for per-stage ratios.
    Search {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// "model" scores pruned generations; "synthetic" is the convex benchmark.
        #[arg(long, default_value = "model")]
        objective: String,
        #[arg(long)]
        n_iter: Option<usize>,
        #[arg(long)]
        class_filter: Option<String>,
        #[arg(long)]
        size: Option<String>,
    },
    /// Generate images with the dense, pruned, or amplified predictor.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Amplification coefficient; requires --mask.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        size: Option<String>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Uniform-sparsity sweep at one size.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated ratios; default 0,0.05,...,0.5.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        size: Option<String>,
    },
    /// Metrics for one configuration over the configured sizes.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        config_id: Option<String>,
    },
    /// Join dense and method eval CSVs into one table plus a side-by-side panel.
    Report {
        #[arg(long)]
        dense_csv: Option<PathBuf>,
        #[arg(long)]
        method_csv: Option<PathBuf>,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write samples as PGM files plus a JSON index.
    Dump(DatasetDumpArgs),
}

#[derive(Args)]
struct DatasetDumpArgs {
    #[arg(long)]
    size: Option<String>,
    /// Samples per class.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_)
        | Error::ShapeMismatch(_)
        | Error::Json(_)
        | Error::CorruptArtifact(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Io(_) => 1,
    }
}

fn parse_grid(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad grid entry '{s}'")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(String, serde_json::Value), Error> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train { epochs, resume, out } => Ok((
            "train".into(),
            cmd_train(&cfg, epochs, resume, out.as_deref())?,
        )),
        Command::Prune {
            checkpoint,
            uniform,
            r_down,
            r_mid,
            r_up,
            out,
        } => {
            let ratios = match (r_down, r_mid, r_up) {
                (Some(d), Some(m), Some(u)) => Some((d, m, u)),
                (None, None, None) => None,
                _ => {
                    return Err(Error::invalid(
                        "--r-down, --r-mid, --r-up must be given together",
                    ));
                }
            };
            Ok((
                "prune".into(),
                cmd_prune(
                    &cfg,
                    &PruneArgs {
                        checkpoint,
                        uniform,
                        ratios,
                        out,
                    },
                )?,
            ))
        }
        Command::Search {
            checkpoint,
            objective,
            n_iter,
            class_filter,
            size,
        } => Ok((
            "search".into(),
            cmd_search(
                &cfg,
                &SearchArgs {
                    checkpoint,
                    objective,
                    n_iter,
                    class_filter,
                    size,
                },
            )?,
        )),
        Command::Sample {
            checkpoint,
            mask,
            k,
            size,
            n,
            seed,
            out_dir,
        } => {
            if k.is_some() && mask.is_none() {
                return Err(Error::invalid("--k requires --mask"));
            }
            Ok((
                "sample".into(),
                cmd_sample(
                    &cfg,
                    &SampleArgs {
                        checkpoint,
                        mask,
                        k,
                        size,
                        n,
                        seed,
                        out_dir,
                    },
                )?,
            ))
        }
        Command::Sweep {
            checkpoint,
            grid,
            size,
        } => {
            let grid = grid.as_deref().map(parse_grid).transpose()?;
            Ok((
                "sweep".into(),
                cmd_sweep(
                    &cfg,
                    &SweepArgs {
                        checkpoint,
                        grid,
                        size,
                    },
                )?,
            ))
        }
        Command::Eval {
            checkpoint,
            mask,
            k,
            config_id,
        } => Ok((
            "eval".into(),
            cmd_eval(
                &cfg,
                &EvalArgs {
                    checkpoint,
                    mask,
                    k,
                    config_id,
                },
            )?,
        )),
        Command::Report {
            dense_csv,
            method_csv,
        } => Ok((
            "report".into(),
            cmd_report(
                &cfg,
                &ReportArgs {
                    dense_csv,
                    method_csv,
                },
            )?,
        )),
        Command::Dataset { action } => match action {
            DatasetCommand::Dump(args) => Ok((
                "dataset dump".into(),
                cmd_dataset_dump(
                    &cfg,
                    &DatasetArgs {
                        size: args.size,
                        n: args.n,
                        out_dir: args.out_dir,
                    },
                )?,
            )),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    // CRPRUNE_THREADS caps the worker pool; results are thread-count invariant.
    if let Ok(val) = std::env::var("CRPRUNE_THREADS") {
        if let Ok(n) = val.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }

    let cli = Cli::parse();
    match run(cli) {
        Ok((command, summary)) => {
            println!(
                "{}",
                json!({"status": "ok", "command": command, "summary": summary})
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_code_for(&err);
            println!(
                "{}",
                json!({"status": "error", "code": code, "message": err.to_string()})
            );
            ExitCode::from(code)
        }
    }
}
