use std::path::PathBuf;
use std::process::ExitCode;

use casa::bench::Axis;
use casa::commands::{self, BenchArgs};
use casa::config::RunConfig;
use casa::CliError;
use casa_core::AttentionKind;
use clap::{Args, Parser, Subcommand};

/// CASA forecaster.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
/// 3 data error, 4 divergence, 5 checkpoint/config mismatch, 6 too few
/// benchmark points, 7 gradient check failure.
#[derive(Parser)]
#[command(name = "casa", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.H=192`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, epoch log and resolved config.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write truth and prediction of this test window. Repeatable.
        #[arg(long = "dump-window", value_name = "INDEX")]
        dump_window: Vec<usize>,
    },
    /// Time and memory scaling along one of N, L, H on synthetic data.
    Bench {
        #[arg(long, default_value = "N")]
        axis: Axis,
        /// Comma-separated axis values, at least four.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        #[arg(long)]
        attention: Option<AttentionKind>,
        /// Include the backward pass.
        #[arg(long)]
        backward: bool,
    },
    /// Correlation structure of checkpoint predictions against the test data.
    Analyze { checkpoints: Vec<PathBuf> },
    /// Finite-difference audit of every parameter gradient on a tiny model.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig, CliError> {
    let data_dir = RunConfig::env_data_dir();
    let mut cfg = RunConfig::resolve_from(
        base,
        common.config.as_deref(),
        &common.overrides,
        data_dir.as_deref(),
    )?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    match cli.command {
        Command::Train => commands::cmd_train(&resolve(c, RunConfig::default())?),
        Command::Eval {
            checkpoint,
            dump_window,
        } => {
            let cfg = resolve(c, RunConfig::default())?;
            commands::cmd_eval(&cfg, &checkpoint, c.config.is_some(), &dump_window)
        }
        Command::Bench {
            axis,
            values,
            attention,
            backward,
        } => {
            let cfg = resolve(c, RunConfig::default())?;
            let args = BenchArgs {
                axis,
                values,
                attention,
                backward: backward.then_some(true),
            };
            commands::cmd_bench(&cfg, &args).map(|_| ())
        }
        Command::Analyze { checkpoints } => {
            commands::cmd_analyze(&resolve(c, RunConfig::default())?, &checkpoints)
        }
        Command::Gradcheck { corrupt } => {
            commands::cmd_gradcheck(&resolve(c, commands::gradcheck_base())?, corrupt.as_deref())
                .map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
