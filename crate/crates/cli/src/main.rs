use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpcore_cli::props::{run_props, PropsOptions};
use dpcore_cli::run::cmd_run;
use dpcore_cli::streams_cmd::cmd_streams_gen;
use dpcore_cli::sweep::cmd_sweep;
use dpcore_cli::CliResult;

#[derive(Parser)]
#[command(name = "dpcore", version, about = "Continual test-time prompt adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config over a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "DPCORE_WORKERS", default_value_t = 1)]
        workers: usize,
    },
    /// Check the simplified clustering properties numerically.
    Props {
        #[arg(long, default_value_t = 40)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Domain schedule tools.
    Streams {
        #[command(subcommand)]
        command: StreamsCommand,
    },
}

#[derive(Subcommand)]
enum StreamsCommand {
    /// Write the schedule described by a spec file as CSV.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            for p in cmd_run(&config, seed, out.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Sweep { config, grid, out, workers } => {
            println!("{}", cmd_sweep(&config, &grid, &out, workers)?.display());
        }
        Command::Props { instances, seed } => {
            for line in run_props(&PropsOptions { instances, seed })?.lines() {
                println!("{line}");
            }
        }
        Command::Streams { command: StreamsCommand::Gen { spec, out } } => {
            let d = cmd_streams_gen(&spec, &out)?;
            println!("{}: {} switches", out.display(), d.switch_count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
