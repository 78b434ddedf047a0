//! The live loop behind `monitor`: polls a source on a wall-clock interval,
//! runs the pipeline, and publishes probes and pipeline outputs to the API.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use wattsentinel_core::fdi::{Pipeline, PipelineOutput};
use wattsentinel_core::simulator::{
    load_script, Action, FaultScript, SimConfig, SimNetwork, SimSource, Topology,
};
use wattsentinel_core::store::Store;
use wattsentinel_core::telemetry::{
    active_power, HardwareSource, PollConfig, PollEvent, PollSchedule, PowerSource, TraceSource,
};
use wattsentinel_core::ModelRegistry;

use crate::config::{AppConfig, SourceKind};

/// Messages buffered per live subscriber before it is dropped.
pub const LIVE_BUFFER: usize = 1024;

#[derive(Debug, Clone, Serialize)]
pub struct SocketReading {
    pub socket: u16,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    pub power_w: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub pdu: String,
    pub ts_ms: u64,
    pub total_w: f64,
    pub sockets: Vec<SocketReading>,
}

/// One item of the live stream.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LiveMessage {
    Probe(ProbeSummary),
    Gap {
        pdu: String,
        ts_ms: u64,
    },
    SourceError {
        pdu: String,
        ts_ms: u64,
        message: String,
    },
    Output {
        output: PipelineOutput,
    },
}

impl LiveMessage {
    pub fn event_name(&self) -> &'static str {
        match self {
            LiveMessage::Probe(_) => "probe",
            LiveMessage::Gap { .. } => "gap",
            LiveMessage::SourceError { .. } => "source_error",
            LiveMessage::Output { .. } => "event",
        }
    }
}

/// A fault to inject, answered with the poll instant it applies at.
pub type FaultRequest = (Action, oneshot::Sender<Result<u64, String>>);

/// What the loop has seen most recently.
#[derive(Debug, Default)]
pub struct LiveStatus {
    pub latest: BTreeMap<String, ProbeSummary>,
    /// The pipeline's inferred device states.
    pub registry: ModelRegistry,
    pub exhausted: bool,
}

/// State shared by the API handlers and the live loop.
#[derive(Debug)]
pub struct Shared {
    pub config: AppConfig,
    pub topology: Topology,
    pub store: Arc<Store>,
    pub live: broadcast::Sender<LiveMessage>,
    /// Present only when the source is the simulator.
    pub faults: Option<mpsc::Sender<FaultRequest>>,
    pub status: RwLock<LiveStatus>,
}

impl Shared {
    pub fn new(
        config: AppConfig,
        topology: Topology,
        store: Arc<Store>,
        faults: Option<mpsc::Sender<FaultRequest>>,
    ) -> Self {
        let (live, _) = broadcast::channel(LIVE_BUFFER);
        let status = LiveStatus {
            registry: topology.registry(),
            ..LiveStatus::default()
        };
        Shared {
            config,
            topology,
            store,
            live,
            faults,
            status: RwLock::new(status),
        }
    }

    pub fn is_simulated(&self) -> bool {
        self.faults.is_some()
    }

    fn publish(&self, msg: LiveMessage) {
        // No subscribers is not an error.
        let _ = self.live.send(msg);
    }
}

pub enum LiveSource {
    Sim(Box<SimSource>),
    Trace(TraceSource),
    Hardware(HardwareSource),
}

impl LiveSource {
    /// Builds the configured source. The simulator starts at `start_ms` and
    /// plays the configured scenario, if any.
    pub fn from_config(
        cfg: &AppConfig,
        topology: &Topology,
        start_ms: u64,
    ) -> anyhow::Result<Self> {
        Ok(match cfg.source {
            SourceKind::Simulator => {
                let script = match &cfg.scenario_path {
                    Some(p) => load_script(&std::fs::read_to_string(p)?, topology)
                        .map_err(anyhow::Error::new)?,
                    None => FaultScript::default(),
                };
                let sim = SimConfig {
                    tick_s: cfg.sample_period_ms as f64 / 1000.0,
                    noise_sigma_w: cfg.noise_sigma_w,
                    seed: cfg.seed,
                    start_ms,
                    ..SimConfig::default()
                };
                LiveSource::Sim(Box::new(SimSource::unbounded(SimNetwork::new(
                    topology.clone(),
                    script,
                    sim,
                )?)))
            }
            SourceKind::Trace => {
                let path = cfg.trace_path.as_deref().expect("validated config");
                LiveSource::Trace(TraceSource::from_path(path)?)
            }
            SourceKind::Hardware => LiveSource::Hardware(HardwareSource {
                pdu_ids: topology.pdu_ids(),
                start_ms,
            }),
        })
    }

    pub fn as_source(&mut self) -> &mut dyn PowerSource {
        match self {
            LiveSource::Sim(s) => s.as_mut(),
            LiveSource::Trace(s) => s,
            LiveSource::Hardware(s) => s,
        }
    }
}

/// Current wall-clock time rounded down to a whole poll period.
pub fn aligned_now_ms(period_ms: u64) -> u64 {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    now - now % period_ms
}

/// Drives `source` until `shutdown` flips, then finishes the pipeline and
/// flushes the store.
pub async fn run_loop(
    shared: Arc<Shared>,
    mut source: LiveSource,
    mut pipeline: Pipeline,
    mut faults: Option<mpsc::Receiver<FaultRequest>>,
    mut shutdown: watch::Receiver<bool>,
) {
    let cfg = &shared.config;
    let start = source.as_source().start_ms();
    let pdus = source.as_source().pdu_ids();
    let mut schedule = PollSchedule::new(
        PollConfig {
            period_ms: cfg.sample_period_ms,
            pdu_ids: pdus,
        },
        start,
    );
    let wall = Duration::from_secs_f64(cfg.sample_period_ms as f64 / 1000.0 / cfg.time_scale);
    let mut interval = tokio::time::interval(wall.max(Duration::from_millis(1)));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

    loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = shutdown.changed() => break,
        }
        if let (Some(rx), LiveSource::Sim(sim)) = (faults.as_mut(), &mut source) {
            while let Ok((action, reply)) = rx.try_recv() {
                let applies_at = schedule.next_ts();
                let _ = reply.send(sim.inject(action).map(|_| applies_at));
            }
        }
        if shared.status.read().unwrap().exhausted {
            continue;
        }
        let Some(events) = schedule.tick(source.as_source()) else {
            tracing::info!("source exhausted");
            shared.status.write().unwrap().exhausted = true;
            continue;
        };
        let mut registry_changed = false;
        for event in events {
            let msg = describe(&event, pipeline.registry());
            if let LiveMessage::Probe(s) = &msg {
                shared
                    .status
                    .write()
                    .unwrap()
                    .latest
                    .insert(s.pdu.clone(), s.clone());
            }
            shared.publish(msg);
            for output in pipeline.process(event) {
                registry_changed |= matches!(
                    output,
                    PipelineOutput::Isolation(_) | PipelineOutput::Calibrated { .. }
                );
                if let PipelineOutput::Warning { message, .. } = &output {
                    tracing::warn!("{message}");
                }
                shared.publish(LiveMessage::Output { output });
            }
        }
        if registry_changed {
            shared.status.write().unwrap().registry = pipeline.registry().clone();
        }
    }

    for output in pipeline.finish() {
        shared.publish(LiveMessage::Output { output });
    }
    if let Err(e) = shared.store.flush() {
        tracing::error!("store flush failed: {e}");
    }
    tracing::info!("monitor loop stopped");
}

fn summarize(p: &wattsentinel_core::ProbeResponse, registry: &ModelRegistry) -> ProbeSummary {
    ProbeSummary {
        pdu: p.pdu_id.clone(),
        ts_ms: p.timestamp_ms,
        total_w: p.total_power().watts(),
        sockets: p
            .sockets
            .iter()
            .map(|s| SocketReading {
                socket: s.socket_id,
                device: registry
                    .device_at(&p.pdu_id, s.socket_id)
                    .map(str::to_string),
                power_w: active_power(s).watts(),
            })
            .collect(),
    }
}

fn describe(event: &PollEvent, registry: &ModelRegistry) -> LiveMessage {
    match event {
        PollEvent::Probe(p) => LiveMessage::Probe(summarize(p, registry)),
        PollEvent::Gap { pdu_id, ts_ms } => LiveMessage::Gap {
            pdu: pdu_id.clone(),
            ts_ms: *ts_ms,
        },
        PollEvent::SourceError {
            pdu_id,
            ts_ms,
            message,
        } => LiveMessage::SourceError {
            pdu: pdu_id.clone(),
            ts_ms: *ts_ms,
            message: message.clone(),
        },
    }
}
