use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use wattsentinel_cli::commands::{
    run_monitor, run_replay, run_report, run_simulate, run_working_hours, SimulateArgs,
};
use wattsentinel_cli::{AppConfig, CliError};
use wattsentinel_core::simulator::SimConfig;

#[derive(Debug, Parser)]
#[command(
    name = "wattsentinel",
    version,
    about = "Network fault detection from PDU power telemetry"
)]
struct Cli {
    /// Configuration file (TOML). `WATTSENTINEL_*` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario on the simulator and detect its changes.
    Simulate {
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        scenario: PathBuf,
        /// Simulated seconds.
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the `.ptrace` and `.csv` outputs.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Seconds per tick. Defaults to the configured sample period.
        #[arg(long)]
        tick_s: Option<f64>,
        /// Epoch milliseconds of the first tick.
        #[arg(long)]
        start_ms: Option<u64>,
    },
    /// Run detection over a recorded trace and print the report.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Poll continuously and serve the HTTP API.
    Monitor {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Export the change report of a persisted store.
    Report {
        /// Epoch milliseconds, inclusive.
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long, default_value_t = u64::MAX)]
        to: u64,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Print the working-hours analysis (JSON) instead of the CSV.
        #[arg(long)]
        working_hours: bool,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = AppConfig::from_env(cli.config.as_deref()).map_err(anyhow::Error::new)?;
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Simulate {
            topology,
            scenario,
            duration,
            seed,
            out,
            tick_s,
            start_ms,
        } => {
            let defaults = SimConfig::default();
            let args = SimulateArgs {
                topology: topology.unwrap_or(cfg.topology_path.clone()),
                scenario,
                out,
                sim: SimConfig {
                    tick_s: tick_s.unwrap_or(cfg.sample_period_ms as f64 / 1000.0),
                    noise_sigma_w: cfg.noise_sigma_w,
                    seed: seed.unwrap_or(cfg.seed),
                    duration_s: duration,
                    start_ms: start_ms.unwrap_or(defaults.start_ms),
                    ..defaults
                },
            };
            let files = run_simulate(&args, &cfg, stdout)?;
            tracing::info!(
                "wrote {} and {}",
                files.trace.display(),
                files.report.display()
            );
        }
        Command::Replay {
            trace,
            topology,
            out,
        } => {
            let topology = topology.unwrap_or(cfg.topology_path.clone());
            let csv = run_replay(&trace, &topology, &cfg, &mut std::io::stderr())?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(anyhow::Error::new)?,
                None => stdout.write_all(&csv).map_err(anyhow::Error::new)?,
            }
        }
        Command::Monitor { listen, store } => {
            if let Some(l) = listen {
                cfg.listen_address = l;
            }
            if store.is_some() {
                cfg.store_path = store;
            }
            let rt = tokio::runtime::Runtime::new().map_err(anyhow::Error::new)?;
            rt.block_on(run_monitor(cfg))?;
        }
        Command::Report {
            from,
            to,
            store,
            working_hours,
            topology,
        } => {
            let store = store
                .or(cfg.store_path.clone())
                .ok_or_else(|| anyhow::anyhow!("no store: pass --store or set store_path"))?;
            let bytes = if working_hours {
                let topology = topology.unwrap_or(cfg.topology_path.clone());
                run_working_hours(&store, &topology, &cfg, from, to)?
            } else {
                run_report(&store, from, to)?
            };
            stdout.write_all(&bytes).map_err(anyhow::Error::new)?;
        }
    }
    Ok(())
}
