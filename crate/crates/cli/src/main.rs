//! Command-line driver: train on a simulated world, analyze flight-recorder
//! dumps, and reshard checkpoints offline.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime
//! failures (a recorder dump path is printed when one was written).

use clap::{Args, Parser, Subcommand};
use meshtrain::config::JobConfig;
use meshtrain::runtime::{analyze_recorder, read_dump};
use meshtrain::trainer::{train, TrainError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "meshtrain", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job described by a TOML config plus overrides.
    Train(TrainArgs),
    /// Analyze a flight-recorder dump from a crashed or stuck run.
    AnalyzeTrace {
        /// Path to a recorder.jsonl dump.
        dump: PathBuf,
    },
    /// Reshard a checkpoint offline into a new (dp-shard, tp) layout.
    ConvertCheckpoint {
        src: PathBuf,
        dst: PathBuf,
        #[arg(long, default_value_t = 1)]
        dp_shard: usize,
        #[arg(long, default_value_t = 1)]
        tp: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides of the form `--section.key=value` (the leading dashes are
    /// optional); they win over file values.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = match JobConfig::parse(args.config.as_deref(), &args.overrides) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return Ok(ExitCode::from(1));
                }
            };
            match train(&cfg) {
                Ok(artifacts) => {
                    let log_every = cfg.training.log_interval.max(1);
                    for m in &artifacts.metrics {
                        if (m.step + 1) % log_every == 0 || m.step + 1 == artifacts.metrics.len() {
                            println!(
                                "step {:>5}  loss {:.6}  tokens/step {}  act peak {}  param peak {}",
                                m.step + 1,
                                m.loss,
                                m.tokens_per_step,
                                m.activation_bytes_peak,
                                m.parameter_bytes_peak
                            );
                        }
                    }
                    println!("{}", artifacts.report);
                    if let Some(dir) = &artifacts.out_dir {
                        println!("artifacts written to {}", dir.display());
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(TrainError::Config(e)) => {
                    eprintln!("config error: {e}");
                    Ok(ExitCode::from(1))
                }
                Err(TrainError::World(we)) => {
                    eprintln!("runtime error: {we}");
                    let report = analyze_recorder(&we.records);
                    eprintln!("{report}");
                    if !cfg.runtime.out_dir.is_empty() {
                        eprintln!("recorder dump: {}/recorder.jsonl", cfg.runtime.out_dir);
                    }
                    Ok(ExitCode::from(2))
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::AnalyzeTrace { dump } => {
            let records = read_dump(&dump)?;
            let report = analyze_recorder(&records);
            print!("{report}");
            Ok(ExitCode::SUCCESS)
        }
        Command::ConvertCheckpoint {
            src,
            dst,
            dp_shard,
            tp,
        } => {
            meshtrain::checkpoint::convert(&src, &dst, dp_shard, tp)?;
            println!(
                "converted {} -> {} (dp_shard {dp_shard}, tp {tp})",
                src.display(),
                dst.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
