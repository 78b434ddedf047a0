//! Signature matching of a segmented change against the knowledge base.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    band_membership, AmplitudeBand, ChangeClass, ChangeFeature, DurationBand, FdiConfig, FdiError,
    FeatureKind, KnowledgeBase, SignatureEntry,
};
use crate::powermodel::{feasible_changes, modeled_delta, RegisteredDevice};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub class: ChangeClass,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub id: u64,
    pub device_id: String,
    pub pdu_id: String,
    pub socket_id: u16,
    pub feature: ChangeFeature,
    /// Ranked by score, highest first.
    pub candidates: Vec<Candidate>,
    pub chosen: ChangeClass,
    /// The top two scores are closer than the tie gap.
    pub ambiguous: bool,
    pub detected_at_ms: u64,
    pub kb_version: u64,
}

/// Scores every applicable signature against `feature`:
/// shape (hard filter) x amplitude membership x duration membership x prior
/// x consistency with the device's current state and model. A class with no
/// structurally feasible change in the current state scores zero.
pub fn detect(
    device_id: &str,
    device: &RegisteredDevice,
    feature: ChangeFeature,
    detected_at_ms: u64,
    kb: &KnowledgeBase,
    cfg: &FdiConfig,
) -> Result<DetectionEvent, FdiError> {
    if kb.signatures().is_empty() {
        return Err(FdiError::EmptyKnowledgeBase);
    }
    let mut best: BTreeMap<ChangeClass, f64> = BTreeMap::new();
    for entry in kb.signatures() {
        if matches!(
            entry.change_class,
            ChangeClass::LinkRateNoop | ChangeClass::Unknown
        ) {
            continue;
        }
        let score = score_entry(entry, device, &feature, cfg)?;
        if score > 0.0 {
            let slot = best.entry(entry.change_class).or_insert(0.0);
            *slot = slot.max(score);
        }
    }
    let mut candidates: Vec<Candidate> = best
        .into_iter()
        .map(|(class, score)| Candidate { class, score })
        .collect();
    // Stable sort keeps enum order among equal scores.
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    if candidates.first().is_none_or(|c| c.score < cfg.min_score) {
        candidates.insert(
            0,
            Candidate {
                class: ChangeClass::Unknown,
                score: cfg.min_score,
            },
        );
    }
    let ambiguous =
        candidates.len() >= 2 && candidates[0].score - candidates[1].score < cfg.tie_gap;
    Ok(DetectionEvent {
        id: 0,
        device_id: device_id.to_string(),
        pdu_id: device.pdu_id.clone(),
        socket_id: device.socket_id,
        chosen: candidates[0].class,
        feature,
        candidates,
        ambiguous,
        detected_at_ms,
        kb_version: kb.version(),
    })
}

fn signed_membership(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo >= 0.0 && x <= 0.0) || (hi <= 0.0 && x >= 0.0) {
        return 0.0;
    }
    band_membership(x, lo, hi)
}

fn score_entry(
    entry: &SignatureEntry,
    device: &RegisteredDevice,
    feature: &ChangeFeature,
    cfg: &FdiConfig,
) -> Result<f64, FdiError> {
    let state = &device.state;
    let model = &device.model;
    if entry.shape != feature.kind || !entry.applies_to(state.device_class) {
        return Ok(0.0);
    }
    let changes = feasible_changes(state, entry.change_class);
    if changes.is_empty() {
        return Ok(0.0);
    }
    let x = feature.amplitude_w;
    let transient = feature.kind == FeatureKind::Spike;
    let mut deltas = Vec::with_capacity(changes.len());
    for c in &changes {
        deltas.push(modeled_delta(model, state, c)?.watts());
    }

    let (amp, consistency) = match entry.amplitude {
        AmplitudeBand::Fixed { lo_w, hi_w } => {
            let consistent = transient
                || deltas.iter().any(|d| {
                    (d - x).abs() <= (cfg.calibration_adopt_fraction * d.abs()).max(cfg.theta_w)
                });
            (
                signed_membership(x, lo_w, hi_w),
                if consistent { 1.0 } else { 0.5 },
            )
        }
        AmplitudeBand::ModelDerived { fraction } => {
            let m = deltas
                .iter()
                .map(|d| {
                    let half = (fraction * d.abs()).max(cfg.theta_w);
                    signed_membership(x, d - half, d + half)
                })
                .fold(0.0, f64::max);
            (m, 1.0)
        }
    };
    let duration = match (entry.duration, feature.duration_s) {
        (None, _) => 1.0,
        (Some(_), None) => 0.0,
        (Some(DurationBand::Fixed { lo_s, hi_s }), Some(d)) => band_membership(d, lo_s, hi_s),
        (Some(DurationBand::WakeBurst { min_s, factor }), Some(d)) => {
            band_membership(d, min_s, factor * model.wake_burst_s)
        }
    };
    Ok(amp * duration * entry.prior_weight * consistency)
}
