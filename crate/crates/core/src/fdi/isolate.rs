//! Isolation: attribute a detection to a concrete state change, recompute
//! the device model, then verify that the residual converges.

use std::cmp::Reverse;

use serde::{Deserialize, Serialize};

use super::{ChangeClass, DetectionEvent, FdiConfig, FeatureKind, HistoryEntry, KnowledgeBase};
use crate::powermodel::{
    feasible_changes, modeled_delta, recompute_parameters, ModelRegistry, StateChange,
};
use crate::units::Power;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Fault,
    Misconfiguration,
    BenignStateChange,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Fault => "fault",
            Verdict::Misconfiguration => "misconfiguration",
            Verdict::BenignStateChange => "benign_state_change",
        }
    }

    pub fn is_fault(self) -> bool {
        self == Verdict::Fault
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationResult {
    pub event: DetectionEvent,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<StateChange>,
    pub model_updated: bool,
    /// Mean |residual| over the verification window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_mean_abs_w: Option<f64>,
    pub verified_samples: usize,
    pub narrative: String,
    pub resolved_at_ms: u64,
}

/// An isolation whose verification window is still filling.
#[derive(Debug, Clone)]
pub struct PendingIsolation {
    event: DetectionEvent,
    change: Option<StateChange>,
    model_updated: bool,
    critical: bool,
    failure: Option<String>,
    abs_sum_mw: u64,
    count: usize,
    needed: usize,
    theta: Power,
    /// |plateau mean - new expectation|, used when no sample was verified.
    fallback: Power,
    last_ts: u64,
}

/// Picks the feasible change whose modeled delta best matches the observed
/// amplitude. Ties go to the highest port id, then the highest target speed.
fn attribute(event: &DetectionEvent, registry: &ModelRegistry) -> Result<StateChange, String> {
    let dev = registry
        .device(&event.device_id)
        .ok_or_else(|| format!("device `{}` is not registered", event.device_id))?;
    let observed = event.feature.amplitude();
    let mut options = Vec::new();
    for change in feasible_changes(&dev.state, event.chosen) {
        let delta = modeled_delta(&dev.model, &dev.state, &change).map_err(|e| e.to_string())?;
        let miss = if event.feature.kind == FeatureKind::Spike {
            0
        } else {
            (delta - observed).abs().milliwatts()
        };
        options.push((miss, Reverse(change.port), Reverse(change.to_speed), change));
    }
    options.sort_by_key(|o| (o.0, o.1, o.2));
    options
        .into_iter()
        .next()
        .map(|o| o.3)
        .ok_or_else(|| format!("{} is not feasible in the current state", event.chosen))
}

/// Applies the detected change to the registry and opens the verification
/// window. The registry and KB are updated immediately.
pub fn begin_isolation(
    event: &DetectionEvent,
    registry: &mut ModelRegistry,
    kb: &mut KnowledgeBase,
    cfg: &FdiConfig,
) -> PendingIsolation {
    let mut pending = PendingIsolation {
        event: event.clone(),
        change: None,
        model_updated: false,
        critical: false,
        failure: None,
        abs_sum_mw: 0,
        count: 0,
        needed: cfg.verify_samples,
        theta: Power::from_watts(cfg.theta_w),
        fallback: Power::ZERO,
        last_ts: event.detected_at_ms,
    };
    if event.chosen == ChangeClass::Unknown {
        pending.failure = Some("unclassified change escalated".into());
        return pending;
    }
    let change = match attribute(event, registry) {
        Ok(c) => c,
        Err(msg) => {
            pending.failure = Some(msg);
            return pending;
        }
    };
    let dev = registry
        .device(&event.device_id)
        .expect("attribute checked registration");
    let observed = (event.feature.kind != FeatureKind::Spike).then(|| event.feature.amplitude());
    let recomputed = recompute_parameters(
        &dev.model,
        &dev.state,
        &change,
        observed,
        cfg.calibration_adopt_fraction,
    );
    let (model, mut state, adopted) = match recomputed {
        Ok(r) => r,
        Err(e) => {
            pending.failure = Some(format!("recomputation failed: {e}"));
            return pending;
        }
    };
    state.as_of_ms = event.detected_at_ms;
    let expected = crate::powermodel::expected_power(&model, &state);
    if let Err(e) = registry.update(&event.device_id, model, state) {
        pending.failure = Some(format!("recomputation failed: {e}"));
        return pending;
    }
    if let Ok(exp) = expected {
        pending.fallback = (Power::from_watts(event.feature.post_mean_w) - exp).abs();
    }
    kb.record(
        &event.device_id,
        HistoryEntry {
            at_ms: event.detected_at_ms,
            class: event.chosen,
            amplitude_w: event.feature.amplitude_w,
        },
    );
    pending.critical = change
        .port
        .is_some_and(|p| cfg.is_critical(&event.device_id, p));
    pending.model_updated = adopted;
    pending.change = Some(change);
    pending
}

impl PendingIsolation {
    pub fn event(&self) -> &DetectionEvent {
        &self.event
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Feeds the residual of the next sample; completes once the
    /// verification window is full.
    pub fn observe(&mut self, ts_ms: u64, residual: Power) -> Option<IsolationResult> {
        if self.failure.is_some() {
            return Some(self.clone().finish(ts_ms));
        }
        self.abs_sum_mw += residual.abs().milliwatts() as u64;
        self.count += 1;
        self.last_ts = ts_ms;
        (self.count >= self.needed).then(|| self.clone().finish(ts_ms))
    }

    /// Closes the window early (new onset on the socket, or end of stream).
    pub fn finish(self, at_ms: u64) -> IsolationResult {
        let resolved_at_ms = at_ms.max(self.event.detected_at_ms);
        let subject = match self.change {
            Some(c) => format!("{c} on {}", self.event.device_id),
            None => format!("{} on {}", self.event.chosen, self.event.device_id),
        };
        let amp = format!("{:+.3} W", self.event.feature.amplitude_w);
        if let Some(reason) = self.failure {
            return IsolationResult {
                verdict: Verdict::Fault,
                change: self.change,
                model_updated: false,
                residual_mean_abs_w: None,
                verified_samples: 0,
                narrative: format!("{subject} ({amp}): {reason}"),
                resolved_at_ms,
                event: self.event,
            };
        }
        let mean_abs = if self.count == 0 {
            self.fallback.watts()
        } else {
            self.abs_sum_mw as f64 / self.count as f64 / 1000.0
        };
        let converged = mean_abs < self.theta.watts();
        let model_note = if self.model_updated {
            "model adopted the observed amplitude"
        } else {
            "model unchanged"
        };
        let (verdict, tail) = match (converged, self.critical) {
            (false, _) => (
                Verdict::Fault,
                format!("residual did not converge (mean |r| {mean_abs:.3} W)"),
            ),
            (true, true) => (
                Verdict::Misconfiguration,
                format!(
                    "port {} is configured as critical",
                    self.change.and_then(|c| c.port).unwrap_or_default()
                ),
            ),
            (true, false) => (
                Verdict::BenignStateChange,
                format!("residual converged (mean |r| {mean_abs:.3} W)"),
            ),
        };
        IsolationResult {
            verdict,
            change: self.change,
            model_updated: self.model_updated,
            residual_mean_abs_w: Some((mean_abs * 1000.0).round() / 1000.0),
            verified_samples: self.count,
            narrative: format!("{subject} ({amp}); {model_note}; {tail}"),
            resolved_at_ms,
            event: self.event,
        }
    }
}

/// One-shot isolation over an already known verification window. The
/// residual for each sample is recomputed by the caller against the
/// updated registry, so this takes measured powers.
pub fn isolate(
    event: &DetectionEvent,
    registry: &mut ModelRegistry,
    kb: &mut KnowledgeBase,
    cfg: &FdiConfig,
    next_samples: &[(u64, Power)],
) -> IsolationResult {
    let mut pending = begin_isolation(event, registry, kb, cfg);
    let expected = registry.expected(&event.device_id).ok();
    for (ts, measured) in next_samples {
        let residual = *measured - expected.unwrap_or(*measured);
        if let Some(done) = pending.observe(*ts, residual) {
            return done;
        }
    }
    let at = next_samples
        .last()
        .map(|s| s.0)
        .unwrap_or(event.detected_at_ms);
    pending.finish(at)
}
