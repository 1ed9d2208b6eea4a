use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use odocorr::cli_io::{self, Checkpoint, RunConfig, TrainMode};
use odocorr::network::Variant;

/// Simulated skid-steer odometry with learned correction.
#[derive(Debug, Parser)]
#[command(name = "odocorr", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the training and test logs into <out>/logs.
    Simulate,
    /// Train a model on the random-drive logs.
    Train {
        #[arg(long, value_enum, default_value_t = Mode::Online)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Net::Remnet2d)]
        variant: Net,
    },
    /// Compare the EKF, the trained checkpoints and dead-reckoning on the test logs.
    Evaluate,
    /// Time inference and training steps of a checkpoint.
    Bench {
        /// Defaults to <out>/checkpoints/online.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Online,
    Batch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Net {
    Remnet2d,
    Ffnn,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate => {
            let logs = cli_io::cmd_simulate(&cfg)?;
            println!("{:<40} {:>8} {:>10} {:>12}", "log", "samples", "duration", "path [m]");
            for s in &logs {
                println!(
                    "{:<40} {:>8} {:>10.2} {:>12.2}",
                    s.path.display(),
                    s.samples,
                    s.duration,
                    s.path_length
                );
            }
            println!("{} logs written to {}", logs.len(), cfg.logs_dir().display());
        }
        Command::Train { mode, variant } => {
            let mode = match mode {
                Mode::Online => TrainMode::Online,
                Mode::Batch => TrainMode::Batch,
            };
            let variant = match variant {
                Net::Remnet2d => Variant::Remnet2d,
                Net::Ffnn => Variant::Ffnn,
            };
            let summary = cli_io::cmd_train(&cfg, mode, variant)?;
            match &summary.loss_trace {
                cli_io::LossTrace::Updates(losses) => {
                    println!("{} online updates", losses.len());
                    if let Some(last) = losses.last() {
                        println!("last loss {last:.6}");
                    }
                }
                cli_io::LossTrace::Epochs(curve) => {
                    for (epoch, train, val) in curve {
                        let val = val.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
                        println!("epoch {epoch:>3}  train {train:.6}  val {val}");
                    }
                }
            }
            println!("checkpoint {}", summary.checkpoint.display());
            println!("loss trace {}", summary.trace.display());
        }
        Command::Evaluate => {
            let eval = cli_io::cmd_evaluate(&cfg)?;
            print!("{}", eval.to_text());
            println!("results written to {}", cfg.results_dir().display());
        }
        Command::Bench {
            checkpoint,
            iterations,
            batch_size,
        } => {
            let path = checkpoint.unwrap_or_else(|| cfg.checkpoint_path("online"));
            let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            println!("{}", cli_io::cmd_bench(&ckpt, iterations, batch_size)?);
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
