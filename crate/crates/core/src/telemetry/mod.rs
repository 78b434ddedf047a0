//! PDU probe readings, the line-delimited wire format, active-power
//! conversion and the polling schedule over pluggable power sources.

mod source;
mod wire;

pub use source::{
    poll, HardwareSource, PollEvent, PollSchedule, Poller, PowerSource, SourceError, SourceRead,
    TraceSource,
};
pub use wire::{encode_probe, parse_probe, ProbeError};

use serde::{Deserialize, Serialize};

use crate::units::Power;

/// One electrical reading: current in mA, voltage and power factor in thousandths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SocketSample {
    /// Socket index, starting at 1. Unused (0) for PDU totals.
    pub socket_id: u16,
    pub current_milliamps: u32,
    /// Voltage in millivolts.
    pub voltage_mv: u32,
    /// Power factor in thousandths, 1..=1000.
    pub power_factor_milli: u16,
}

impl SocketSample {
    pub fn voltage_volts(&self) -> f64 {
        self.voltage_mv as f64 / 1000.0
    }

    pub fn power_factor(&self) -> f64 {
        self.power_factor_milli as f64 / 1000.0
    }

    /// Checks the reading invariants, naming the first offending field.
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.voltage_mv == 0 {
            return Err(ProbeError::validation("V", "voltage must be > 0"));
        }
        if self.power_factor_milli == 0 || self.power_factor_milli > 1000 {
            return Err(ProbeError::validation(
                "power_factor",
                format!(
                    "power factor {} outside (0, 1]",
                    crate::units::format_milli(self.power_factor_milli as i64)
                ),
            ));
        }
        Ok(())
    }
}

/// W = I(A) x V(V) x PF, exact in integer arithmetic and rounded half-up to 1 mW.
pub fn active_power(sample: &SocketSample) -> Power {
    let nanowatts = sample.current_milliamps as u128
        * sample.voltage_mv as u128
        * sample.power_factor_milli as u128;
    Power::from_milliwatts(((nanowatts + 500_000) / 1_000_000) as i64)
}

/// One probe of a PDU: every socket plus the PDU aggregate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub pdu_id: String,
    pub timestamp_ms: u64,
    pub sockets: Vec<SocketSample>,
    pub total: SocketSample,
}

impl ProbeResponse {
    pub fn total_power(&self) -> Power {
        active_power(&self.total)
    }

    pub fn socket_power_sum(&self) -> Power {
        self.sockets.iter().map(active_power).sum()
    }

    /// Per-record invariants; the aggregate check is separate because its
    /// tolerance depends on the source.
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.pdu_id.is_empty() {
            return Err(ProbeError::validation("pdu", "empty PDU identifier"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sockets {
            if s.socket_id == 0 {
                return Err(ProbeError::validation("id", "socket ids start at 1"));
            }
            if !seen.insert(s.socket_id) {
                return Err(ProbeError::validation(
                    "id",
                    format!("duplicate socket id {}", s.socket_id),
                ));
            }
            s.validate()?;
        }
        self.total.validate()
    }

    /// |power(total) - sum(power(socket))| <= tolerance.
    pub fn check_aggregate(&self, tolerance: Power) -> Result<(), ProbeError> {
        let diff = (self.total_power() - self.socket_power_sum()).abs();
        if diff > tolerance {
            return Err(ProbeError::validation(
                "total",
                format!(
                    "total {} W differs from socket sum {} W by more than {} W",
                    self.total_power(),
                    self.socket_power_sum(),
                    tolerance
                ),
            ));
        }
        Ok(())
    }

    pub fn socket(&self, socket_id: u16) -> Option<&SocketSample> {
        self.sockets.iter().find(|s| s.socket_id == socket_id)
    }
}

/// Polling schedule for a set of PDUs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollConfig {
    pub period_ms: u64,
    pub pdu_ids: Vec<String>,
}

impl PollConfig {
    pub const MIN_PERIOD_MS: u64 = 100;

    pub fn new(period_ms: u64, pdu_ids: Vec<String>) -> Result<Self, SourceError> {
        if period_ms < Self::MIN_PERIOD_MS {
            return Err(SourceError::Config(format!(
                "poll period {period_ms} ms is below the {} ms minimum",
                Self::MIN_PERIOD_MS
            )));
        }
        Ok(PollConfig { period_ms, pdu_ids })
    }
}

impl Default for PollConfig {
    fn default() -> Self {
        PollConfig {
            period_ms: 1000,
            pdu_ids: Vec::new(),
        }
    }
}

const NOMINAL_VOLTAGE_MV: u32 = 230_000;
const NOMINAL_PF_MILLI: u16 = 950;
const MAX_VOLTAGE_DEVIATION_MV: i64 = 11_500;

/// Finds an (I, V, PF) triple whose active power is exactly `target`.
///
/// The current is integer milliamps, so at 230 V and PF 0.95 one step is
/// 218.5 mW. The voltage is trimmed in its last decimal (within 5% of
/// nominal) to land on the target; tiny loads also lower the power factor.
pub fn synthesize_reading(socket_id: u16, target: Power) -> SocketSample {
    let target_mw = target.milliwatts().max(0);
    if target_mw == 0 {
        return SocketSample {
            socket_id,
            current_milliamps: 0,
            voltage_mv: NOMINAL_VOLTAGE_MV,
            power_factor_milli: NOMINAL_PF_MILLI,
        };
    }
    let nominal_step = NOMINAL_VOLTAGE_MV as f64 * NOMINAL_PF_MILLI as f64 / 1e6;
    let centre = ((target_mw as f64 / nominal_step).round() as i64).max(1);
    let target_nw = target_mw as i128 * 1_000_000;
    for pf in (1..=NOMINAL_PF_MILLI as i64).rev() {
        for offset in [0i64, 1, -1, 2, -2, 3, -3, 4, -4, 5, -5] {
            let ma = centre + offset;
            if ma < 1 {
                continue;
            }
            let k = ma as i128 * pf as i128;
            let mv_guess = (target_nw as f64 / k as f64).round() as i128;
            for mv in [
                mv_guess,
                mv_guess - 1,
                mv_guess + 1,
                NOMINAL_VOLTAGE_MV as i128,
            ] {
                if (mv as i64 - NOMINAL_VOLTAGE_MV as i64).abs() > MAX_VOLTAGE_DEVIATION_MV {
                    continue;
                }
                let sample = SocketSample {
                    socket_id,
                    current_milliamps: ma as u32,
                    voltage_mv: mv as u32,
                    power_factor_milli: pf as u16,
                };
                if active_power(&sample).milliwatts() == target_mw {
                    return sample;
                }
            }
        }
    }
    // Unreachable for loads above a few mW; keep the nearest nominal reading.
    SocketSample {
        socket_id,
        current_milliamps: centre as u32,
        voltage_mv: NOMINAL_VOLTAGE_MV,
        power_factor_milli: NOMINAL_PF_MILLI,
    }
}
