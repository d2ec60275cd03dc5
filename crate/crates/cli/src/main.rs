use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steinflow_cli::config::{parse_config, ExperimentKind};
use steinflow_cli::experiments;

#[derive(Parser)]
#[command(
    name = "steinflow",
    version,
    about = "Variational mapping particle filter experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; omitted fields take the experiment defaults.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override such as `mapping.max_iters=300`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Map a prior sample onto the posterior of one observation.
    Static(ConfigArgs),
    /// Run a filter on the Lorenz-63 twin experiment.
    L63(ConfigArgs),
    /// Print the fully resolved configuration and exit.
    Validate(ConfigArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Static(a) => {
            let cfg = parse_config(&a.config, &a.overrides, Some(ExperimentKind::Static))?;
            let s = experiments::run_static(&cfg)?;
            log::info!(
                "{} particles mapped in {} iterations (converged: {})",
                s.n_particles,
                s.mapping.iterations_run,
                s.mapping.converged
            );
        }
        Command::L63(a) => {
            let cfg = parse_config(&a.config, &a.overrides, Some(ExperimentKind::Lorenz63))?;
            let s = experiments::run_l63(&cfg)?;
            log::info!("{}: mean RMSE {} over {} cycles", s.filter, s.mean_rmse, s.n_cycles);
        }
        Command::Validate(a) => {
            let cfg = parse_config(&a.config, &a.overrides, None)?;
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &cfg)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
