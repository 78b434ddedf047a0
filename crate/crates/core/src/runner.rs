//! End-to-end runs: a power source polled into the pipeline, with the probe
//! stream recorded as a trace and the store exported as a CSV report.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::fdi::{FdiConfig, FdiError, KnowledgeBase, Pipeline, PipelineOutput};
use crate::powermodel::ModelRegistry;
use crate::simulator::{FaultScript, SimConfig, SimError, SimNetwork, SimSource, Topology};
use crate::store::Store;
use crate::telemetry::{
    encode_probe, poll, PollConfig, PollEvent, PowerSource, ProbeError, SourceError, TraceSource,
};
use crate::units::Power;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fdi(#[from] FdiError),
    #[error("invalid detection config: {0}")]
    Config(String),
    #[error("cannot encode probe: {0}")]
    Encode(#[from] ProbeError),
}

#[derive(Debug)]
pub struct RunOutput {
    /// Every probe polled, one wire-format line each.
    pub trace: Vec<u8>,
    pub outputs: Vec<PipelineOutput>,
    pub summary: BTreeMap<String, usize>,
    pub report_csv: Vec<u8>,
    pub probes: usize,
    /// Registry as the pipeline left it.
    pub registry: ModelRegistry,
    /// Why a replayed trace stopped early, if it did.
    pub trace_error: Option<SourceError>,
}

/// Polls `source` until it is exhausted, feeding every event to a fresh
/// pipeline over `registry`.
pub fn run_source<S: PowerSource + ?Sized>(
    source: &mut S,
    period_ms: u64,
    registry: ModelRegistry,
    kb: KnowledgeBase,
    cfg: FdiConfig,
    store: Arc<Store>,
) -> Result<RunOutput, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let tolerance = Power::from_watts(cfg.aggregate_tolerance_w);
    let mut pipeline = Pipeline::new(registry, kb, cfg, store.clone())?;
    let poll_cfg = PollConfig {
        period_ms,
        pdu_ids: Vec::new(),
    };
    let mut trace = Vec::new();
    let mut outputs = Vec::new();
    let mut probes = 0;
    for event in poll(source, poll_cfg) {
        if let PollEvent::Probe(p) = &event {
            trace.extend(encode_probe(p, tolerance)?);
            trace.push(b'\n');
            probes += 1;
        }
        outputs.extend(pipeline.process(event));
    }
    outputs.extend(pipeline.finish());
    let _ = store.flush();
    Ok(RunOutput {
        trace,
        summary: Pipeline::summarize(&outputs),
        outputs,
        report_csv: store.export_report(0, u64::MAX),
        probes,
        registry: pipeline.registry().clone(),
        trace_error: None,
    })
}

/// Simulates `script` on `topology` and runs detection on the result.
pub fn simulate(
    topology: &Topology,
    script: FaultScript,
    sim: SimConfig,
    kb: KnowledgeBase,
    cfg: FdiConfig,
    store: Arc<Store>,
) -> Result<RunOutput, RunError> {
    let period = sim.tick_ms();
    let net = SimNetwork::new(topology.clone(), script, sim)?;
    let mut source = SimSource::new(net);
    run_source(&mut source, period, topology.registry(), kb, cfg, store)
}

/// Runs detection over a recorded trace. A malformed tail stops the replay;
/// everything before it is processed.
pub fn replay(
    trace: &[u8],
    topology: &Topology,
    kb: KnowledgeBase,
    cfg: FdiConfig,
    store: Arc<Store>,
) -> Result<RunOutput, RunError> {
    let mut source = TraceSource::from_bytes(trace);
    let period = source.suggested_period_ms();
    let error = source.error.clone();
    let mut out = run_source(&mut source, period, topology.registry(), kb, cfg, store)?;
    out.trace_error = error;
    Ok(out)
}
