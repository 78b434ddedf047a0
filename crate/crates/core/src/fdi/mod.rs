//! Residual generation, change segmentation, signature matching and
//! isolation of network state changes from power telemetry.

mod detect;
mod isolate;
mod kb;
mod pipeline;
mod residual;
mod segment;
mod working_hours;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detect::{detect, Candidate, DetectionEvent};
pub use isolate::{begin_isolation, isolate, IsolationResult, PendingIsolation, Verdict};
pub use kb::{
    AmplitudeBand, ChangeClass, DurationBand, FeatureKind, HistoryEntry, KnowledgeBase,
    SignatureEntry,
};
pub use pipeline::{Correction, Pipeline, PipelineOutput, UnknownDevice};
pub use residual::{compare_total, Comparison, Residual, ResidualScope};
pub use segment::{scan, segment, ChangeFeature, Scan, SeriesPoint};
pub use working_hours::{
    calibrate_from_history, device_histories, working_hours_report, DeviceHistory, FlaggedDevice,
    WorkingHoursConfig, WorkingHoursError, WorkingHoursReport,
};

use crate::powermodel::ModelError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FdiError {
    #[error("knowledge base has no signatures")]
    EmptyKnowledgeBase,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A port whose loss is a policy violation rather than a benign change.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PortRef {
    pub device: String,
    pub port: u16,
}

impl FromStr for PortRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (device, port) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("expected `device:port`, got `{s}`"))?;
        let port: u16 = port
            .parse()
            .map_err(|_| format!("bad port number in `{s}`"))?;
        if device.is_empty() || port == 0 {
            return Err(format!("expected `device:port`, got `{s}`"));
        }
        Ok(PortRef {
            device: device.to_string(),
            port,
        })
    }
}

impl TryFrom<String> for PortRef {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<PortRef> for String {
    fn from(p: PortRef) -> String {
        p.to_string()
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.device, self.port)
    }
}

/// Detection and isolation tuning. Every knob has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdiConfig {
    /// Deviation threshold on residuals and window means, watts.
    pub theta_w: f64,
    pub window_samples: usize,
    pub spike_max_duration_s: f64,
    pub return_band_w: f64,
    pub verify_samples: usize,
    pub min_score: f64,
    pub burst_factor: f64,
    pub tie_gap: f64,
    pub lpi_revert_horizon_s: f64,
    pub calibration_adopt_fraction: f64,
    pub calibration_samples: usize,
    pub aggregate_tolerance_w: f64,
    pub critical_ports: Vec<PortRef>,
}

impl Default for FdiConfig {
    fn default() -> Self {
        FdiConfig {
            theta_w: 0.1,
            window_samples: 10,
            spike_max_duration_s: 5.0,
            return_band_w: 0.05,
            verify_samples: 15,
            min_score: 0.25,
            burst_factor: 1.5,
            tie_gap: 0.05,
            lpi_revert_horizon_s: 60.0,
            calibration_adopt_fraction: 0.2,
            calibration_samples: 60,
            aggregate_tolerance_w: 0.0,
            critical_ports: Vec::new(),
        }
    }
}

impl FdiConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("theta_w", self.theta_w),
            ("spike_max_duration_s", self.spike_max_duration_s),
            ("return_band_w", self.return_band_w),
            ("min_score", self.min_score),
            ("burst_factor", self.burst_factor),
            ("tie_gap", self.tie_gap),
            ("lpi_revert_horizon_s", self.lpi_revert_horizon_s),
            (
                "calibration_adopt_fraction",
                self.calibration_adopt_fraction,
            ),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be > 0"));
            }
        }
        if !(self.aggregate_tolerance_w.is_finite() && self.aggregate_tolerance_w >= 0.0) {
            return Err("aggregate_tolerance_w must be >= 0".into());
        }
        if self.window_samples < 2 {
            return Err("window_samples must be >= 2".into());
        }
        if self.verify_samples == 0 || self.calibration_samples == 0 {
            return Err("verify_samples and calibration_samples must be > 0".into());
        }
        Ok(())
    }

    pub fn is_critical(&self, device: &str, port: u16) -> bool {
        self.critical_ports
            .iter()
            .any(|p| p.device == device && p.port == port)
    }
}

/// `max(0, 1 - 0.5 |x - mid| / half)`: 1 at the midpoint, 0.5 on the band
/// edge, 0 at twice the half width. Degenerate bands score by exact match.
pub(crate) fn band_membership(x: f64, lo: f64, hi: f64) -> f64 {
    let mid = (lo + hi) / 2.0;
    let half = (hi - lo) / 2.0;
    if half <= 0.0 {
        return if x == mid { 1.0 } else { 0.0 };
    }
    (1.0 - 0.5 * (x - mid).abs() / half).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn membership_shape() {
        assert_eq!(band_membership(-0.35, -0.4, -0.3), 1.0);
        assert!((band_membership(-0.3, -0.4, -0.3) - 0.5).abs() < 1e-12);
        assert_eq!(band_membership(-0.2, -0.4, -0.3), 0.0);
    }

    #[test]
    fn port_ref_parsing() {
        let p: PortRef = "sw1:3".parse().unwrap();
        assert_eq!((p.device.as_str(), p.port), ("sw1", 3));
        assert!("sw1".parse::<PortRef>().is_err());
        assert!("sw1:0".parse::<PortRef>().is_err());
    }

    #[test]
    fn default_config_valid() {
        FdiConfig::default().validate().unwrap();
    }
}
