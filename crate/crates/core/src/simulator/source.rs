//! The simulator as a polled power source.

use std::collections::BTreeMap;

use super::network::{SimError, SimNetwork};
use super::script::Action;
use crate::telemetry::{PowerSource, ProbeResponse, SourceError, SourceRead};

/// Serves probes from a [`SimNetwork`], stepping it once per poll instant.
/// A source without an end runs until dropped.
#[derive(Debug, Clone)]
pub struct SimSource {
    net: SimNetwork,
    end_ms: Option<u64>,
    current: Option<u64>,
    cache: BTreeMap<String, ProbeResponse>,
}

impl SimSource {
    /// Runs for the configured duration.
    pub fn new(net: SimNetwork) -> Self {
        let end = net.config().end_ms();
        SimSource {
            net,
            end_ms: Some(end),
            current: None,
            cache: BTreeMap::new(),
        }
    }

    pub fn unbounded(net: SimNetwork) -> Self {
        SimSource {
            end_ms: None,
            ..SimSource::new(net)
        }
    }

    pub fn network(&self) -> &SimNetwork {
        &self.net
    }

    pub fn inject(&mut self, action: Action) -> Result<(), String> {
        self.net.inject(action)
    }
}

impl PowerSource for SimSource {
    fn pdu_ids(&self) -> Vec<String> {
        self.net.topology().pdu_ids()
    }

    fn start_ms(&self) -> u64 {
        self.net.config().start_ms
    }

    fn read(&mut self, pdu_id: &str, poll_ts_ms: u64) -> Result<SourceRead, SourceError> {
        if self.end_ms.is_some_and(|end| poll_ts_ms >= end) {
            return Ok(SourceRead::Exhausted);
        }
        if self.current != Some(poll_ts_ms) {
            let probes = self
                .net
                .step(poll_ts_ms)
                .map_err(|e: SimError| SourceError::Read {
                    pdu: pdu_id.to_string(),
                    message: e.to_string(),
                })?;
            self.current = Some(poll_ts_ms);
            self.cache = probes.into_iter().map(|p| (p.pdu_id.clone(), p)).collect();
        }
        match self.cache.remove(pdu_id) {
            Some(p) => Ok(SourceRead::Probe(p)),
            None if self.pdu_ids().iter().any(|p| p == pdu_id) => Ok(SourceRead::Stalled),
            None => Err(SourceError::UnknownPdu(pdu_id.to_string())),
        }
    }
}
