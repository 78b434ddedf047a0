//! Working-hours inference from a day of network power, and the list of
//! devices left operational outside those hours.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::powermodel::{calibrate_level, expected_power, DeviceClass, DeviceMode, ModelRegistry};
use crate::store::{Payload, RecordKey, RecordKind, Store};
use crate::units::Power;

const HOUR_MS: u64 = 3_600_000;
const DAY_S: u64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkingHoursError {
    #[error("no power history")]
    NoData,
    #[error("history spans {got_s} s; at least {required_s} s (24 h) are required")]
    InsufficientHistory { required_s: u64, got_s: u64 },
    #[error("samples are {got_s} s apart; at most {max_s} s (one per minute) is required")]
    TooCoarse { max_s: u64, got_s: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkingHoursConfig {
    /// Hours whose network total reaches `activity_factor x night floor` are working hours.
    pub activity_factor: f64,
    /// Percentile of hourly totals taken as the night floor.
    pub floor_percentile: f64,
    /// Off-hours mean at or above this fraction of the operational baseline
    /// counts as left operational.
    pub operational_fraction: f64,
    /// Device classes expected to sleep outside working hours.
    pub eligible_classes: Vec<DeviceClass>,
}

impl Default for WorkingHoursConfig {
    fn default() -> Self {
        WorkingHoursConfig {
            activity_factor: 1.5,
            floor_percentile: 0.1,
            operational_fraction: 0.9,
            eligible_classes: vec![DeviceClass::Host, DeviceClass::AccessPoint],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceHistory {
    pub device_id: String,
    pub class: DeviceClass,
    pub operational_baseline_w: f64,
    pub samples: Vec<(u64, Power)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedDevice {
    pub device_id: String,
    pub class: DeviceClass,
    pub off_hours_mean_w: f64,
    pub operational_baseline_w: f64,
    pub suggestion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingHoursReport {
    /// Mean network power per UTC hour of day; `None` where no sample fell.
    pub hourly_total_w: Vec<Option<f64>>,
    pub night_floor_w: f64,
    /// UTC hours of day classified as working hours, ascending.
    pub working_hours: Vec<u8>,
    pub flagged: Vec<FlaggedDevice>,
}

fn hour_of_day(ts_ms: u64) -> usize {
    ((ts_ms / HOUR_MS) % 24) as usize
}

/// Infers working hours from the hourly network total and flags eligible
/// devices whose off-hours mean stays in their operational band.
pub fn working_hours_report(
    history: &[DeviceHistory],
    cfg: &WorkingHoursConfig,
) -> Result<WorkingHoursReport, WorkingHoursError> {
    let all_ts = history.iter().flat_map(|d| d.samples.iter().map(|s| s.0));
    let (Some(first), Some(last)) = (all_ts.clone().min(), all_ts.max()) else {
        return Err(WorkingHoursError::NoData);
    };
    let mut max_gap = 0u64;
    let mut min_gap = u64::MAX;
    for d in history {
        for w in d.samples.windows(2) {
            let gap = w[1].0.saturating_sub(w[0].0);
            max_gap = max_gap.max(gap);
            if gap > 0 {
                min_gap = min_gap.min(gap);
            }
        }
    }
    if max_gap > 60_000 {
        return Err(WorkingHoursError::TooCoarse {
            max_s: 60,
            got_s: max_gap.div_ceil(1000),
        });
    }
    let step = if min_gap == u64::MAX { 0 } else { min_gap };
    let span_s = (last - first + step) / 1000;
    if span_s < DAY_S {
        return Err(WorkingHoursError::InsufficientHistory {
            required_s: DAY_S,
            got_s: span_s,
        });
    }

    let mut hourly = vec![None; 24];
    for (h, slot) in hourly.iter_mut().enumerate() {
        let mut total = 0.0;
        let mut any = false;
        for d in history {
            let (sum, n) = d
                .samples
                .iter()
                .filter(|s| hour_of_day(s.0) == h)
                .fold((0i64, 0usize), |(s, n), x| (s + x.1.milliwatts(), n + 1));
            if n > 0 {
                any = true;
                total += sum as f64 / n as f64 / 1000.0;
            }
        }
        if any {
            *slot = Some(total);
        }
    }
    let mut sorted: Vec<f64> = hourly.iter().flatten().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let rank =
        ((cfg.floor_percentile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let night_floor_w = sorted[rank - 1];
    let working_hours: Vec<u8> = hourly
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_some_and(|t| t >= cfg.activity_factor * night_floor_w))
        .map(|(h, _)| h as u8)
        .collect();

    let mut flagged = Vec::new();
    for d in history {
        if !cfg.eligible_classes.contains(&d.class) {
            continue;
        }
        let off: Vec<i64> = d
            .samples
            .iter()
            .filter(|s| !working_hours.contains(&(hour_of_day(s.0) as u8)))
            .map(|s| s.1.milliwatts())
            .collect();
        if off.is_empty() {
            continue;
        }
        let mean = off.iter().sum::<i64>() as f64 / off.len() as f64 / 1000.0;
        if mean >= cfg.operational_fraction * d.operational_baseline_w {
            flagged.push(FlaggedDevice {
                device_id: d.device_id.clone(),
                class: d.class,
                off_hours_mean_w: (mean * 1000.0).round() / 1000.0,
                operational_baseline_w: d.operational_baseline_w,
                suggestion: "transition to sleep".into(),
            });
        }
    }
    Ok(WorkingHoursReport {
        hourly_total_w: hourly,
        night_floor_w,
        working_hours,
        flagged,
    })
}

/// Collects each registered device's socket power from the store; the
/// operational baseline is the current model evaluated in operational mode.
pub fn device_histories(
    store: &Store,
    registry: &ModelRegistry,
    from_ms: u64,
    to_ms: u64,
) -> Vec<DeviceHistory> {
    registry
        .devices()
        .map(|(id, dev)| {
            let key = RecordKey::Socket {
                pdu: dev.pdu_id.clone(),
                socket: dev.socket_id,
            };
            let samples = store
                .query_window(&key, RecordKind::PowerSocket, from_ms, to_ms)
                .into_iter()
                .filter_map(|r| match r.payload {
                    Payload::PowerSocket { power_w, .. } => Some((r.ts_ms, power_w)),
                    _ => None,
                })
                .collect();
            let mut op = dev.state.clone();
            op.mode = DeviceMode::Operational;
            for p in &mut op.ports {
                p.oper_up = p.admin_up;
                p.lpi_active = false;
            }
            let baseline = expected_power(&dev.model, &op)
                .map(Power::watts)
                .unwrap_or(dev.model.base.watts());
            DeviceHistory {
                device_id: id.to_string(),
                class: dev.state.device_class,
                operational_baseline_w: baseline,
                samples,
            }
        })
        .collect()
}

/// Re-levels each device model on the mean of its first `samples` stored
/// socket readings, as the pipeline does at start-up. Devices with fewer
/// readings, or whose level is rejected, keep their model.
pub fn calibrate_from_history(
    store: &Store,
    registry: &ModelRegistry,
    samples: usize,
) -> ModelRegistry {
    let mut out = registry.clone();
    for (id, dev) in registry.devices() {
        let key = RecordKey::Socket {
            pdu: dev.pdu_id.clone(),
            socket: dev.socket_id,
        };
        let first: Vec<(u64, Power)> = store
            .query_window(&key, RecordKind::PowerSocket, 0, u64::MAX)
            .into_iter()
            .filter_map(|r| match r.payload {
                Payload::PowerSocket { power_w, .. } => Some((r.ts_ms, power_w)),
                _ => None,
            })
            .take(samples)
            .collect();
        if samples == 0 || first.len() < samples {
            continue;
        }
        let sum: i64 = first.iter().map(|(_, p)| p.milliwatts()).sum();
        let mean = Power::from_milliwatts((sum as f64 / first.len() as f64).round() as i64);
        let at = first.last().map(|(ts, _)| *ts).unwrap_or(0);
        if let Ok(model) = calibrate_level(&dev.model, &dev.state, mean, at) {
            let _ = out.update(id, model, dev.state.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIDNIGHT: u64 = 1_704_067_200_000;

    fn day(
        id: &str,
        class: DeviceClass,
        baseline: f64,
        f: impl Fn(u64) -> f64,
        hours: u64,
    ) -> DeviceHistory {
        DeviceHistory {
            device_id: id.into(),
            class,
            operational_baseline_w: baseline,
            samples: (0..hours * 60)
                .map(|m| {
                    let ts = MIDNIGHT + m * 60_000;
                    (ts, Power::from_watts(f(m / 60)))
                })
                .collect(),
        }
    }

    fn office(h: u64) -> bool {
        (8..18).contains(&h)
    }

    #[test]
    fn flags_the_ap_left_on() {
        let hist = vec![
            day("sw1", DeviceClass::Switch, 45.8, |_| 45.8, 24),
            day(
                "h1",
                DeviceClass::Host,
                60.0,
                |h| if office(h) { 60.0 } else { 3.0 },
                24,
            ),
            day(
                "h2",
                DeviceClass::Host,
                60.0,
                |h| if office(h) { 60.0 } else { 3.0 },
                24,
            ),
            day("ap1", DeviceClass::AccessPoint, 8.0, |_| 8.0, 24),
        ];
        let r = working_hours_report(&hist, &WorkingHoursConfig::default()).unwrap();
        assert_eq!(r.working_hours, (8..18).collect::<Vec<u8>>());
        let ids: Vec<_> = r.flagged.iter().map(|f| f.device_id.as_str()).collect();
        assert_eq!(ids, vec!["ap1"]);
    }

    #[test]
    fn everything_asleep_flags_nothing() {
        let hist = vec![
            day(
                "h1",
                DeviceClass::Host,
                60.0,
                |h| if office(h) { 60.0 } else { 3.0 },
                24,
            ),
            day(
                "ap1",
                DeviceClass::AccessPoint,
                8.0,
                |h| if office(h) { 8.0 } else { 2.0 },
                24,
            ),
        ];
        let r = working_hours_report(&hist, &WorkingHoursConfig::default()).unwrap();
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn half_day_is_insufficient() {
        let hist = vec![day("h1", DeviceClass::Host, 60.0, |_| 60.0, 12)];
        assert_eq!(
            working_hours_report(&hist, &WorkingHoursConfig::default()),
            Err(WorkingHoursError::InsufficientHistory {
                required_s: 86_400,
                got_s: 43_200
            })
        );
    }

    #[test]
    fn coarse_sampling_rejected() {
        let mut h = day("h1", DeviceClass::Host, 60.0, |_| 60.0, 24);
        h.samples.retain(|s| (s.0 / 60_000) % 2 == 0);
        assert!(matches!(
            working_hours_report(&[h], &WorkingHoursConfig::default()),
            Err(WorkingHoursError::TooCoarse { .. })
        ));
    }

    #[test]
    fn calibration_matches_the_pipeline() {
        use crate::fdi::{FdiConfig, KnowledgeBase};
        use crate::runner::simulate;
        use crate::simulator::{load_script, SimConfig, Topology};
        use std::sync::Arc;

        let topo = Topology::from_toml(
            "[[device]]\nid = \"h1\"\nclass = \"host\"\npdu = \"p\"\nsocket = 1\n\n\
             [[device]]\nid = \"ap1\"\nclass = \"access_point\"\npdu = \"p\"\nsocket = 2\n",
        )
        .unwrap();
        let store = Arc::new(Store::in_memory());
        let cfg = FdiConfig::default();
        let out = simulate(
            &topo,
            load_script("", &topo).unwrap(),
            SimConfig {
                duration_s: 90.0,
                ..SimConfig::default()
            },
            KnowledgeBase::default(),
            cfg.clone(),
            store.clone(),
        )
        .unwrap();
        let again = calibrate_from_history(&store, &topo.registry(), cfg.calibration_samples);
        for id in ["h1", "ap1"] {
            assert_eq!(
                again.device(id).unwrap().model.base,
                out.registry.device(id).unwrap().model.base
            );
        }
        let short = calibrate_from_history(&store, &topo.registry(), 1000);
        assert_eq!(short, topo.registry());
    }
}
