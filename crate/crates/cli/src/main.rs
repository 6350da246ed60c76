//! `prune-relief`: train, prune, bound and report on importance-pruned networks.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data or file format,
//! 4 numeric failure (divergence or a violated bound).

mod commands;
mod config;
mod lock;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relief_core::Error;

use commands::{BoundViolations, BoundsArgs, Context, PruneArgs, CONFIG_COPY};
use config::{Dtype, RunConfig};
use lock::RunLock;

#[derive(Parser, Debug)]
#[command(name = "prune-relief", version, about = "Importance-score pruning with retraining")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the baseline from a seeded initialization.
    Train,
    /// Iteratively prune and retrain; resumes an interrupted run.
    Prune {
        /// Model to prune (default: <out>/baseline).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Initial parameters for reinit (default: <out>/initial).
        #[arg(long)]
        initial: Option<PathBuf>,
        /// Overrides prune.iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Prune one layer without retraining and compare bounds with measurements.
    Bounds {
        /// Model to analyse (default: <out>/best, then <out>/baseline).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index of the layer to prune (default: bounds.layer).
        #[arg(long)]
        layer: Option<usize>,
        /// Kept score mass (default: bounds.alpha).
        #[arg(long)]
        alpha: Option<f64>,
        /// Pruning-set size.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write metrics.json, heatmaps and charts for a run directory.
    Report,
    /// Print the test accuracy of a checkpoint.
    Eval {
        /// Model to evaluate (default: <out>/best, then <out>/baseline).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-layer importance score matrices.
    Scores {
        /// Model to score (default: <out>/best, then <out>/baseline).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pruning-set size (default: prune.n_pruning_samples).
        #[arg(long)]
        n: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<BoundViolations>().is_some() {
        return 4;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Diverged { .. }) => 4,
        Some(Error::Format(_) | Error::Io { .. } | Error::Json(_)) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn context(common: &Common) -> Result<Context, Error> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    let seed = common
        .seed
        .or(cfg.seed)
        .ok_or_else(|| Error::Config("seed: set it in the config or pass --seed".into()))?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("out: set it in the config or pass --out".into()))?;
    Ok(Context { cfg, seed, out })
}

macro_rules! typed {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            Dtype::F32 => commands::$f::<f32>($($arg),*),
            Dtype::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn report(common: &Common) -> anyhow::Result<()> {
    // the run directory alone suffices; its config copy enables score statistics
    let (out, cfg, seed) = match (&common.out, &common.config) {
        (Some(out), None) => {
            let copy = out.join(CONFIG_COPY);
            let cfg = copy.is_file().then(|| RunConfig::load(&copy)).transpose()?;
            let seed = common.seed.or(cfg.as_ref().and_then(|c| c.seed));
            (out.clone(), cfg, seed)
        }
        _ => {
            let ctx = context(common)?;
            (ctx.out, Some(ctx.cfg), Some(ctx.seed))
        }
    };
    let _lock = RunLock::acquire(&out)?;
    let path = commands::report_cmd(&out, cfg.as_ref(), seed)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Report = cli.command {
        return report(&cli.common);
    }
    let ctx = context(&cli.common)?;
    let dtype = ctx.cfg.dtype;
    match &cli.command {
        Command::Train => {
            let _lock = RunLock::acquire(&ctx.out)?;
            let acc = typed!(dtype, train_cmd(&ctx))?;
            println!("baseline test accuracy {acc:.2}%");
            println!("saved {}", ctx.out.join(commands::BASELINE_DIR).display());
        }
        Command::Prune {
            checkpoint,
            initial,
            iterations,
        } => {
            let _lock = RunLock::acquire(&ctx.out)?;
            let args = PruneArgs {
                checkpoint: checkpoint.as_deref(),
                initial: initial.as_deref(),
                iterations: *iterations,
            };
            let reports = typed!(dtype, prune_cmd(&ctx, &args))?;
            for r in &reports {
                println!(
                    "iteration {:>3}: accuracy {:.2}% (pruned {:.2}%), remaining {:.2}%",
                    r.iteration,
                    r.accuracy,
                    r.accuracy_pruned,
                    100.0 * r.remaining_fraction
                );
            }
        }
        Command::Bounds {
            checkpoint,
            layer,
            alpha,
            n,
        } => {
            let _lock = RunLock::acquire(&ctx.out)?;
            let args = BoundsArgs {
                checkpoint: checkpoint.as_deref(),
                layer: *layer,
                alpha: *alpha,
                n: *n,
            };
            let targets = typed!(dtype, bounds_cmd(&ctx, &args))?;
            println!(
                "{targets} targets within bounds; wrote {}",
                ctx.out.join(commands::BOUNDS_FILE).display()
            );
        }
        Command::Eval { checkpoint } => {
            let (acc, n) = typed!(dtype, eval_cmd(&ctx, checkpoint.as_deref()))?;
            println!("test accuracy {acc:.2}% on {n} samples");
        }
        Command::Scores { checkpoint, n } => {
            let _lock = RunLock::acquire(&ctx.out)?;
            let written = typed!(dtype, scores_cmd(&ctx, checkpoint.as_deref(), *n))?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Report => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
