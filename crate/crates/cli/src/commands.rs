//! Subcommand bodies. Each returns a [`CliError`] that maps onto an exit
//! status.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;
use tokio::sync::{mpsc, watch};
use wattsentinel_core::fdi::{
    calibrate_from_history, device_histories, working_hours_report, Pipeline, WorkingHoursConfig,
};
use wattsentinel_core::runner::{replay, simulate, RunOutput};
use wattsentinel_core::simulator::{load_script, ScriptError, SimConfig, Topology};
use wattsentinel_core::store::Store;

use crate::api;
use crate::config::{AppConfig, SourceKind};
use crate::monitor::{aligned_now_ms, run_loop, LiveSource, Shared};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Script {
        path: PathBuf,
        #[source]
        source: ScriptError,
    },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Script { .. } => 2,
            CliError::Other(_) => 1,
        }
    }
}

fn other(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Other(e.into())
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| other(anyhow::anyhow!("cannot read {}: {e}", path.display())))
}

pub fn load_topology(path: &Path) -> Result<Topology, CliError> {
    Topology::load(path).map_err(|e| other(anyhow::anyhow!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub topology: PathBuf,
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub sim: SimConfig,
}

/// Paths written by `simulate`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulateFiles {
    pub trace: PathBuf,
    pub report: PathBuf,
}

pub fn run_simulate(
    args: &SimulateArgs,
    cfg: &AppConfig,
    stdout: &mut dyn Write,
) -> Result<SimulateFiles, CliError> {
    let topology = load_topology(&args.topology)?;
    let script =
        load_script(&read(&args.scenario)?, &topology).map_err(|source| CliError::Script {
            path: args.scenario.clone(),
            source,
        })?;
    let out = simulate(
        &topology,
        script,
        args.sim.clone(),
        cfg.knowledge_base().map_err(other)?,
        cfg.fdi(),
        Arc::new(Store::in_memory()),
    )
    .map_err(other)?;

    std::fs::create_dir_all(&args.out).map_err(other)?;
    let stem = args
        .scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let files = SimulateFiles {
        trace: args.out.join(format!("{stem}.ptrace")),
        report: args.out.join(format!("{stem}.csv")),
    };
    std::fs::write(&files.trace, &out.trace).map_err(other)?;
    std::fs::write(&files.report, &out.report_csv).map_err(other)?;
    write_summary(stdout, &out).map_err(other)?;
    Ok(files)
}

fn write_summary(w: &mut dyn Write, out: &RunOutput) -> std::io::Result<()> {
    writeln!(w, "probes: {}", out.probes)?;
    if out.summary.is_empty() {
        writeln!(w, "events: none")?;
    }
    for (class, n) in &out.summary {
        writeln!(w, "{class}: {n}")?;
    }
    Ok(())
}

/// Replays `trace` and returns the CSV report. The summary goes to `log`.
pub fn run_replay(
    trace: &Path,
    topology: &Path,
    cfg: &AppConfig,
    log: &mut dyn Write,
) -> Result<Vec<u8>, CliError> {
    let topology = load_topology(topology)?;
    let bytes = std::fs::read(trace)
        .map_err(|e| other(anyhow::anyhow!("cannot read {}: {e}", trace.display())))?;
    let out = replay(
        &bytes,
        &topology,
        cfg.knowledge_base().map_err(other)?,
        cfg.fdi(),
        Arc::new(Store::in_memory()),
    )
    .map_err(other)?;
    if let Some(e) = &out.trace_error {
        writeln!(log, "warning: replay stopped early: {e}").map_err(other)?;
    }
    write_summary(log, &out).map_err(other)?;
    Ok(out.report_csv)
}

/// The CSV report of a persisted store for `[from, to]`.
pub fn run_report(store_path: &Path, from: u64, to: u64) -> Result<Vec<u8>, CliError> {
    if !store_path.is_file() {
        return Err(other(anyhow::anyhow!(
            "no store at {}",
            store_path.display()
        )));
    }
    let store = Store::open(store_path).map_err(other)?;
    Ok(store.export_report(from, to))
}

/// Working-hours analysis of a persisted store, as pretty JSON. Baselines
/// are recalibrated from the stored readings.
pub fn run_working_hours(
    store_path: &Path,
    topology: &Path,
    cfg: &AppConfig,
    from: u64,
    to: u64,
) -> Result<Vec<u8>, CliError> {
    let topology = load_topology(topology)?;
    let store = Store::open(store_path).map_err(other)?;
    let registry =
        calibrate_from_history(&store, &topology.registry(), cfg.fdi().calibration_samples);
    let histories = device_histories(&store, &registry, from, to);
    let report = working_hours_report(&histories, &WorkingHoursConfig::default()).map_err(other)?;
    let mut out = serde_json::to_vec_pretty(&report).map_err(other)?;
    out.push(b'\n');
    Ok(out)
}

/// A running monitor: the live loop plus the shared state the API serves.
pub struct Monitor {
    pub shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    task: tokio::task::JoinHandle<()>,
}

impl Monitor {
    /// Builds the source, pipeline and store from `cfg` and starts polling.
    pub fn start(cfg: AppConfig) -> Result<Monitor, CliError> {
        let topology = load_topology(&cfg.topology_path)?;
        let store = match &cfg.store_path {
            Some(p) => Arc::new(Store::open(p).map_err(other)?),
            None => Arc::new(Store::in_memory()),
        };
        let source = LiveSource::from_config(&cfg, &topology, aligned_now_ms(cfg.sample_period_ms))
            .map_err(|e| match e.downcast::<ScriptError>() {
                Ok(source) => CliError::Script {
                    path: cfg.scenario_path.clone().unwrap_or_default(),
                    source,
                },
                Err(e) => CliError::Other(e),
            })?;
        let pipeline = Pipeline::new(
            topology.registry(),
            cfg.knowledge_base().map_err(other)?,
            cfg.fdi(),
            store.clone(),
        )
        .map_err(other)?;
        let (tx, rx) = if cfg.source == SourceKind::Simulator {
            let (tx, rx) = mpsc::channel(64);
            (Some(tx), Some(rx))
        } else {
            (None, None)
        };
        let shared = Arc::new(Shared::new(cfg, topology, store, tx));
        let (shutdown, shutdown_rx) = watch::channel(false);
        let task = tokio::spawn(run_loop(shared.clone(), source, pipeline, rx, shutdown_rx));
        Ok(Monitor {
            shared,
            shutdown,
            task,
        })
    }

    pub fn router(&self) -> axum::Router {
        api::router(self.shared.clone())
    }

    /// Stops polling, finishes the pipeline and flushes the store.
    pub async fn stop(self) {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
    }
}

/// Serves the API on the configured address until ctrl-c. Shutdown order:
/// source and pipeline, then the store flush, then the listener.
pub async fn run_monitor(cfg: AppConfig) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(&cfg.listen_address)
        .await
        .map_err(|e| other(anyhow::anyhow!("cannot bind {}: {e}", cfg.listen_address)))?;
    let monitor = Monitor::start(cfg)?;
    tracing::info!("listening on {}", listener.local_addr().map_err(other)?);
    let app = monitor.router();
    let (stopped_tx, stopped_rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped_rx.await;
            })
            .await
    });
    tokio::signal::ctrl_c().await.map_err(other)?;
    tracing::info!("shutting down");
    monitor.stop().await;
    let _ = stopped_tx.send(());
    server.await.map_err(other)?.map_err(other)?;
    Ok(())
}
