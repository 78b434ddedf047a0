//! Residuals of measured against model-expected power, whole PDU first,
//! then per socket.

use serde::{Deserialize, Serialize};

use crate::powermodel::{ModelError, ModelRegistry};
use crate::telemetry::{active_power, ProbeResponse};
use crate::units::Power;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScope {
    Pdu(String),
    Socket { pdu: String, socket: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residual {
    pub scope: ResidualScope,
    pub timestamp_ms: u64,
    pub measured_w: Power,
    pub expected_w: Power,
    pub value_w: Power,
}

impl Residual {
    fn new(scope: ResidualScope, timestamp_ms: u64, measured: Power, expected: Power) -> Self {
        Residual {
            scope,
            timestamp_ms,
            measured_w: measured,
            expected_w: expected,
            value_w: measured - expected,
        }
    }

    pub fn socket(&self) -> Option<u16> {
        match self.scope {
            ResidualScope::Socket { socket, .. } => Some(socket),
            ResidualScope::Pdu(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub total: Residual,
    /// Residuals of every bound socket present in the probe.
    pub sockets: Vec<Residual>,
    /// `None` when the whole-PDU residual is within theta; otherwise the
    /// bound sockets whose own residual exceeds theta.
    pub flagged: Option<Vec<u16>>,
    /// Unbound sockets drawing more than theta, with their power.
    pub unknown: Vec<(u16, Power)>,
}

/// Compares a probe against the registry. Deviations in either direction
/// flag. Unbound sockets are expected to draw what they draw, so they never
/// move the total residual; they are reported in `unknown` instead.
pub fn compare_total(
    probe: &ProbeResponse,
    registry: &ModelRegistry,
    theta: Power,
) -> Result<Comparison, ModelError> {
    let mut expected_total = Power::ZERO;
    let mut sockets = Vec::new();
    let mut unknown = Vec::new();
    for s in &probe.sockets {
        let measured = active_power(s);
        match registry.device_at(&probe.pdu_id, s.socket_id) {
            Some(device) => {
                let expected = registry.expected(device)?;
                expected_total += expected;
                sockets.push(Residual::new(
                    ResidualScope::Socket {
                        pdu: probe.pdu_id.clone(),
                        socket: s.socket_id,
                    },
                    probe.timestamp_ms,
                    measured,
                    expected,
                ));
            }
            None => {
                expected_total += measured;
                if measured > theta {
                    unknown.push((s.socket_id, measured));
                }
            }
        }
    }
    let total = Residual::new(
        ResidualScope::Pdu(probe.pdu_id.clone()),
        probe.timestamp_ms,
        probe.total_power(),
        expected_total,
    );
    let flagged = (total.value_w.abs() > theta).then(|| {
        sockets
            .iter()
            .filter(|r| r.value_w.abs() > theta)
            .filter_map(Residual::socket)
            .collect()
    });
    Ok(Comparison {
        total,
        sockets,
        flagged,
        unknown,
    })
}
