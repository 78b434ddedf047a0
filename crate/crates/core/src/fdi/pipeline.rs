//! The per-probe detection loop: store, compare, segment, detect, isolate.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    begin_isolation, compare_total, detect, scan, ChangeClass, DetectionEvent, FdiConfig, FdiError,
    IsolationResult, KnowledgeBase, PendingIsolation, Scan, SeriesPoint,
};
use crate::powermodel::{
    accumulate_usage, calibrate_level, classify_socket, default_class_ranges, DeviceClass,
    LifecycleAccount, ModelRegistry, UsageSample,
};
use crate::store::{DetectionRecord, HistoryRecord, Payload, RecordKey, Store};
use crate::telemetry::{active_power, PollEvent, ProbeResponse};
use crate::units::Power;

/// A socket drawing power with no registered device behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownDevice {
    pub pdu_id: String,
    pub socket_id: u16,
    pub ts_ms: u64,
    pub power_w: Power,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_class: Option<DeviceClass>,
    pub narrative: String,
}

/// Retroactive reclassification of an earlier detection. The original
/// records are left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub device_id: String,
    pub pdu_id: String,
    pub socket_id: u16,
    pub ts_ms: u64,
    pub original_event_id: u64,
    pub original_class: ChangeClass,
    pub corrected_class: ChangeClass,
    pub revert_event_id: u64,
    pub amplitude_w: f64,
    pub narrative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PipelineOutput {
    Calibrated {
        pdu_id: String,
        ts_ms: u64,
        baselines: BTreeMap<String, f64>,
    },
    Detection(DetectionEvent),
    Isolation(IsolationResult),
    Correction(Correction),
    UnknownDevice(UnknownDevice),
    Warning {
        pdu_id: String,
        ts_ms: u64,
        message: String,
    },
}

#[derive(Debug, Default)]
struct SocketState {
    buffer: VecDeque<SeriesPoint>,
    in_analysis: bool,
    pending: Option<PendingIsolation>,
    /// Residuals observed while an isolation is being verified.
    verify: Vec<(u64, Power)>,
}

#[derive(Debug, Default)]
struct UnknownTrack {
    sum_mw: i64,
    count: usize,
    classified: bool,
}

#[derive(Debug, Default)]
struct PduState {
    probes: usize,
    calibration: BTreeMap<u16, (i64, usize)>,
    calibrated: bool,
    sockets: BTreeMap<u16, SocketState>,
    unknown: BTreeMap<u16, UnknownTrack>,
    last_ts: u64,
}

#[derive(Debug, Default)]
struct UsageState {
    account: LifecycleAccount,
    last: Option<(u64, Power)>,
}

/// Runs detection and isolation over probe streams of any number of PDUs.
/// Processing is sequential and deterministic for a given input order.
pub struct Pipeline {
    cfg: FdiConfig,
    registry: ModelRegistry,
    kb: KnowledgeBase,
    store: Arc<Store>,
    pdus: BTreeMap<String, PduState>,
    usage: BTreeMap<String, UsageState>,
    last_port_down: BTreeMap<String, DetectionEvent>,
    next_event_id: u64,
    store_warned: bool,
}

impl Pipeline {
    pub fn new(
        registry: ModelRegistry,
        kb: KnowledgeBase,
        cfg: FdiConfig,
        store: Arc<Store>,
    ) -> Result<Self, FdiError> {
        if kb.signatures().is_empty() {
            return Err(FdiError::EmptyKnowledgeBase);
        }
        let usage = registry
            .devices()
            .map(|(id, _)| (id.to_string(), UsageState::default()))
            .collect();
        Ok(Pipeline {
            cfg,
            registry,
            kb,
            store,
            pdus: BTreeMap::new(),
            usage,
            last_port_down: BTreeMap::new(),
            next_event_id: 1,
            store_warned: false,
        })
    }

    /// Sets the static manufacturing and dismantling energy of a device.
    pub fn set_lifecycle_constants(&mut self, device_id: &str, e_m_joules: f64, e_d_joules: f64) {
        let u = self.usage.entry(device_id.to_string()).or_default();
        u.account.e_m_joules = e_m_joules.max(0.0);
        u.account.e_d_joules = e_d_joules.max(0.0);
    }

    pub fn config(&self) -> &FdiConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn lifecycle(&self, device_id: &str) -> Option<LifecycleAccount> {
        self.usage.get(device_id).map(|u| u.account)
    }

    pub fn is_calibrated(&self, pdu_id: &str) -> bool {
        self.pdus.get(pdu_id).is_some_and(|p| p.calibrated)
    }

    fn store_record(
        &mut self,
        out: &mut Vec<PipelineOutput>,
        pdu: &str,
        ts: u64,
        rec: HistoryRecord,
    ) {
        if let Err(e) = self.store.append(rec) {
            if !self.store_warned {
                self.store_warned = true;
                out.push(PipelineOutput::Warning {
                    pdu_id: pdu.to_string(),
                    ts_ms: ts,
                    message: format!("store unavailable, continuing in memory: {e}"),
                });
            }
        }
    }

    pub fn process(&mut self, event: PollEvent) -> Vec<PipelineOutput> {
        let mut out = Vec::new();
        match event {
            PollEvent::Probe(p) => self.on_probe(p, &mut out),
            PollEvent::Gap { pdu_id, ts_ms } => {
                let pdu = self.pdus.entry(pdu_id.clone()).or_default();
                pdu.last_ts = pdu.last_ts.max(ts_ms);
                for s in pdu.sockets.values_mut() {
                    s.buffer.clear();
                    s.in_analysis = false;
                }
                for (_, device) in self.registry.sockets_of(&pdu_id) {
                    if let Some(u) = self.usage.get_mut(device) {
                        u.last = None;
                    }
                }
            }
            PollEvent::SourceError {
                pdu_id,
                ts_ms,
                message,
            } => out.push(PipelineOutput::Warning {
                pdu_id,
                ts_ms,
                message,
            }),
        }
        out
    }

    fn on_probe(&mut self, probe: ProbeResponse, out: &mut Vec<PipelineOutput>) {
        let pdu_id = probe.pdu_id.clone();
        let ts = probe.timestamp_ms;
        let tolerance = Power::from_watts(self.cfg.aggregate_tolerance_w);
        if let Err(e) = probe.check_aggregate(tolerance) {
            out.push(PipelineOutput::Warning {
                pdu_id: pdu_id.clone(),
                ts_ms: ts,
                message: e.to_string(),
            });
        }

        self.store_record(
            out,
            &pdu_id,
            ts,
            HistoryRecord::new(
                RecordKey::Pdu(pdu_id.clone()),
                ts,
                Payload::PowerTotal {
                    power_w: probe.total_power(),
                },
            ),
        );
        let mut measured: BTreeMap<u16, Power> = BTreeMap::new();
        for s in &probe.sockets {
            let w = active_power(s);
            measured.insert(s.socket_id, w);
            let device_id = self
                .registry
                .device_at(&pdu_id, s.socket_id)
                .map(str::to_string);
            if let Some(d) = &device_id {
                let u = self.usage.entry(d.clone()).or_default();
                let mut samples = Vec::with_capacity(2);
                if let Some((pts, pw)) = u.last {
                    samples.push(UsageSample::At {
                        ts_ms: pts,
                        power: pw,
                    });
                }
                samples.push(UsageSample::At {
                    ts_ms: ts,
                    power: w,
                });
                if let Ok(acc) = accumulate_usage(&u.account, &samples) {
                    u.account = acc;
                }
                u.last = Some((ts, w));
            }
            self.store_record(
                out,
                &pdu_id,
                ts,
                HistoryRecord::new(
                    RecordKey::Socket {
                        pdu: pdu_id.clone(),
                        socket: s.socket_id,
                    },
                    ts,
                    Payload::PowerSocket {
                        power_w: w,
                        device_id,
                    },
                ),
            );
        }

        let theta = Power::from_watts(self.cfg.theta_w);
        let w = self.cfg.window_samples;
        let pdu = self.pdus.entry(pdu_id.clone()).or_default();
        pdu.last_ts = ts;

        if !pdu.calibrated {
            pdu.probes += 1;
            for (socket, _) in self.registry.sockets_of(&pdu_id) {
                if let Some(p) = measured.get(&socket) {
                    let slot = pdu.calibration.entry(socket).or_default();
                    slot.0 += p.milliwatts();
                    slot.1 += 1;
                    let st = pdu.sockets.entry(socket).or_default();
                    push_trimmed(
                        &mut st.buffer,
                        SeriesPoint {
                            ts_ms: ts,
                            power: *p,
                        },
                        w + 1,
                    );
                }
            }
            if pdu.probes >= self.cfg.calibration_samples {
                pdu.calibrated = true;
                let sums = std::mem::take(&mut pdu.calibration);
                self.finish_calibration(&pdu_id, ts, sums, out);
            }
            self.track_unknown(&pdu_id, &probe, theta, out);
            return;
        }

        let comparison = match compare_total(&probe, &self.registry, theta) {
            Ok(c) => c,
            Err(e) => {
                out.push(PipelineOutput::Warning {
                    pdu_id,
                    ts_ms: ts,
                    message: format!("residual computation failed: {e}"),
                });
                return;
            }
        };
        self.track_unknown(&pdu_id, &probe, theta, out);
        let flagged = comparison.flagged.unwrap_or_default();

        for residual in &comparison.sockets {
            let Some(socket) = residual.socket() else {
                continue;
            };
            let point = SeriesPoint {
                ts_ms: ts,
                power: residual.measured_w,
            };
            let is_flagged = flagged.contains(&socket);
            self.analyse_socket(&pdu_id, socket, point, residual.value_w, is_flagged, out);
        }
    }

    fn finish_calibration(
        &mut self,
        pdu_id: &str,
        ts: u64,
        sums: BTreeMap<u16, (i64, usize)>,
        out: &mut Vec<PipelineOutput>,
    ) {
        let mut baselines = BTreeMap::new();
        for (socket, (sum, n)) in sums {
            let Some(device) = self.registry.device_at(pdu_id, socket).map(str::to_string) else {
                continue;
            };
            let mean = Power::from_milliwatts((sum as f64 / n as f64).round() as i64);
            let dev = self.registry.device(&device).expect("bound device");
            let mut state = dev.state.clone();
            state.as_of_ms = ts;
            match calibrate_level(&dev.model, &state, mean, ts) {
                Ok(model) => {
                    let _ = self.registry.update(&device, model, state.clone());
                    baselines.insert(device.clone(), mean.watts());
                    self.store_record(
                        out,
                        pdu_id,
                        ts,
                        HistoryRecord::new(
                            RecordKey::Device(device),
                            ts,
                            Payload::StateSnapshot(state),
                        ),
                    );
                }
                Err(e) => out.push(PipelineOutput::Warning {
                    pdu_id: pdu_id.to_string(),
                    ts_ms: ts,
                    message: format!("calibration of {device} rejected: {e}"),
                }),
            }
        }
        out.push(PipelineOutput::Calibrated {
            pdu_id: pdu_id.to_string(),
            ts_ms: ts,
            baselines,
        });
    }

    fn track_unknown(
        &mut self,
        pdu_id: &str,
        probe: &ProbeResponse,
        theta: Power,
        out: &mut Vec<PipelineOutput>,
    ) {
        let needed = self.cfg.calibration_samples;
        let mut reports = Vec::new();
        let pdu = self.pdus.entry(pdu_id.to_string()).or_default();
        for s in &probe.sockets {
            if self.registry.device_at(pdu_id, s.socket_id).is_some() {
                continue;
            }
            let w = active_power(s);
            if w <= theta {
                continue;
            }
            let track = pdu.unknown.entry(s.socket_id).or_default();
            track.sum_mw += w.milliwatts();
            track.count += 1;
            if track.count == 1 {
                reports.push(UnknownDevice {
                    pdu_id: pdu_id.to_string(),
                    socket_id: s.socket_id,
                    ts_ms: probe.timestamp_ms,
                    power_w: w,
                    baseline_w: None,
                    suggested_class: None,
                    narrative: format!(
                        "unregistered device drawing {w} W on {pdu_id} socket {}",
                        s.socket_id
                    ),
                });
            } else if track.count == needed && !track.classified {
                track.classified = true;
                let baseline = Power::from_milliwatts(
                    (track.sum_mw as f64 / track.count as f64).round() as i64,
                );
                let class = classify_socket(baseline, &default_class_ranges());
                let suggestion = match class {
                    Some(c) => format!("looks like a {c}"),
                    None => "no unique class matches; register manually".to_string(),
                };
                reports.push(UnknownDevice {
                    pdu_id: pdu_id.to_string(),
                    socket_id: s.socket_id,
                    ts_ms: probe.timestamp_ms,
                    power_w: w,
                    baseline_w: Some(baseline.watts()),
                    suggested_class: class,
                    narrative: format!(
                        "unregistered device on {pdu_id} socket {} with baseline {baseline} W; {suggestion}",
                        s.socket_id
                    ),
                });
            }
        }
        for u in reports {
            self.store_record(
                out,
                pdu_id,
                u.ts_ms,
                HistoryRecord::new(
                    RecordKey::Socket {
                        pdu: u.pdu_id.clone(),
                        socket: u.socket_id,
                    },
                    u.ts_ms,
                    Payload::Detection(DetectionRecord::UnknownDevice(u.clone())),
                ),
            );
            out.push(PipelineOutput::UnknownDevice(u));
        }
    }

    fn analyse_socket(
        &mut self,
        pdu_id: &str,
        socket: u16,
        point: SeriesPoint,
        residual: Power,
        flagged: bool,
        out: &mut Vec<PipelineOutput>,
    ) {
        let w = self.cfg.window_samples;
        let Some(device_id) = self.registry.device_at(pdu_id, socket).map(str::to_string) else {
            return;
        };
        let st = self
            .pdus
            .get_mut(pdu_id)
            .expect("pdu state exists")
            .sockets
            .entry(socket)
            .or_default();
        if st.in_analysis {
            st.buffer.push_back(point);
        } else {
            push_trimmed(&mut st.buffer, point, w + 1);
        }
        if st.pending.is_some() {
            st.verify.push((point.ts_ms, residual));
        }
        if flagged {
            st.in_analysis = true;
        }
        let mut found = None;
        let mut onset_pending = false;
        if st.in_analysis {
            let series: Vec<SeriesPoint> = st.buffer.iter().copied().collect();
            match scan(&series, &self.cfg) {
                Scan::NoChange => st.in_analysis = false,
                Scan::Pending => {}
                Scan::Awaiting { .. } => onset_pending = true,
                Scan::Found {
                    feature, plateau, ..
                } => {
                    st.buffer.drain(..plateau);
                    found = Some(feature);
                }
            }
        }

        let Some(feature) = found else {
            // Close a verification window once it is full and no new change
            // is being classified on this socket.
            let ready = st
                .pending
                .as_ref()
                .is_some_and(|_| st.verify.len() >= self.cfg.verify_samples);
            if ready && !onset_pending {
                let result = self.close_pending(pdu_id, socket, None, point.ts_ms);
                if let Some(r) = result {
                    self.emit_isolation(pdu_id, r, out);
                }
            }
            return;
        };

        // A new change on this socket closes the previous verification
        // with the samples preceding the new onset.
        if let Some(r) = self.close_pending(pdu_id, socket, Some(feature.onset_ms), point.ts_ms) {
            self.emit_isolation(pdu_id, r, out);
        }

        let dev = self.registry.device(&device_id).expect("bound device");
        let mut event = match detect(&device_id, dev, feature, point.ts_ms, &self.kb, &self.cfg) {
            Ok(e) => e,
            Err(e) => {
                out.push(PipelineOutput::Warning {
                    pdu_id: pdu_id.to_string(),
                    ts_ms: point.ts_ms,
                    message: e.to_string(),
                });
                return;
            }
        };
        event.id = self.next_event_id;
        self.next_event_id += 1;
        self.store_record(
            out,
            pdu_id,
            event.detected_at_ms,
            HistoryRecord::new(
                RecordKey::Device(device_id.clone()),
                event.detected_at_ms,
                Payload::Detection(DetectionRecord::Event(event.clone())),
            ),
        );
        out.push(PipelineOutput::Detection(event.clone()));
        self.check_lpi_revert(&event, out);
        if event.chosen == ChangeClass::Unknown {
            return;
        }

        let pending = begin_isolation(&event, &mut self.registry, &mut self.kb, &self.cfg);
        if pending.is_failed() {
            let r = pending.finish(point.ts_ms);
            self.emit_isolation(pdu_id, r, out);
            return;
        }
        if let Some(dev) = self.registry.device(&device_id) {
            let snapshot = dev.state.clone();
            self.store_record(
                out,
                pdu_id,
                event.detected_at_ms,
                HistoryRecord::new(
                    RecordKey::Device(device_id),
                    event.detected_at_ms,
                    Payload::StateSnapshot(snapshot),
                ),
            );
        }
        let st = self.socket_mut(pdu_id, socket);
        st.pending = Some(pending);
        st.verify.clear();
    }

    fn socket_mut(&mut self, pdu_id: &str, socket: u16) -> &mut SocketState {
        self.pdus
            .get_mut(pdu_id)
            .expect("pdu state exists")
            .sockets
            .entry(socket)
            .or_default()
    }

    /// Finalises the socket's open isolation using verification samples
    /// strictly before `cutoff_ms`, at most `verify_samples` of them.
    fn close_pending(
        &mut self,
        pdu_id: &str,
        socket: u16,
        cutoff_ms: Option<u64>,
        at_ms: u64,
    ) -> Option<IsolationResult> {
        let needed = self.cfg.verify_samples;
        let st = self.socket_mut(pdu_id, socket);
        let mut pending = st.pending.take()?;
        let samples = std::mem::take(&mut st.verify);
        let mut result = None;
        for (ts, r) in samples
            .into_iter()
            .filter(|(ts, _)| cutoff_ms.is_none_or(|c| *ts < c))
            .take(needed)
        {
            result = pending.observe(ts, r);
            if result.is_some() {
                break;
            }
        }
        Some(result.unwrap_or_else(|| pending.finish(at_ms)))
    }

    fn emit_isolation(&mut self, pdu_id: &str, r: IsolationResult, out: &mut Vec<PipelineOutput>) {
        self.store_record(
            out,
            pdu_id,
            r.event.detected_at_ms,
            HistoryRecord::new(
                RecordKey::Device(r.event.device_id.clone()),
                r.event.detected_at_ms,
                Payload::Isolation(r.clone()),
            ),
        );
        out.push(PipelineOutput::Isolation(r));
    }

    /// A PortUp shortly after a PortDown of opposite amplitude on the same
    /// device means the port only idled: the PortDown was an LPI entry.
    fn check_lpi_revert(&mut self, event: &DetectionEvent, out: &mut Vec<PipelineOutput>) {
        match event.chosen {
            ChangeClass::PortDown => {
                self.last_port_down
                    .insert(event.device_id.clone(), event.clone());
            }
            ChangeClass::PortUp => {
                let Some(down) = self.last_port_down.get(&event.device_id) else {
                    return;
                };
                let horizon_ms = (self.cfg.lpi_revert_horizon_s * 1000.0) as u64;
                let within =
                    event.feature.onset_ms.saturating_sub(down.feature.onset_ms) <= horizon_ms;
                let cancels = (down.feature.amplitude_w + event.feature.amplitude_w).abs()
                    <= self.cfg.theta_w;
                if !(within && cancels) {
                    return;
                }
                let down = self
                    .last_port_down
                    .remove(&event.device_id)
                    .expect("checked above");
                let correction = Correction {
                    device_id: event.device_id.clone(),
                    pdu_id: event.pdu_id.clone(),
                    socket_id: event.socket_id,
                    ts_ms: event.detected_at_ms,
                    original_event_id: down.id,
                    original_class: ChangeClass::PortDown,
                    corrected_class: ChangeClass::EeeLpiEnter,
                    revert_event_id: event.id,
                    amplitude_w: down.feature.amplitude_w,
                    narrative: format!(
                        "event {} ({:+.3} W) reverted after {:.0} s by event {}; reclassified as {}, revert is the {}",
                        down.id,
                        down.feature.amplitude_w,
                        (event.feature.onset_ms - down.feature.onset_ms) as f64 / 1000.0,
                        event.id,
                        ChangeClass::EeeLpiEnter,
                        ChangeClass::EeeLpiExit,
                    ),
                };
                let pdu_id = event.pdu_id.clone();
                self.store_record(
                    out,
                    &pdu_id,
                    correction.ts_ms,
                    HistoryRecord::new(
                        RecordKey::Device(correction.device_id.clone()),
                        correction.ts_ms,
                        Payload::Correction(correction.clone()),
                    ),
                );
                out.push(PipelineOutput::Correction(correction));
            }
            _ => {}
        }
    }

    /// Flushes every open isolation. Call at end of stream.
    pub fn finish(&mut self) -> Vec<PipelineOutput> {
        let mut out = Vec::new();
        let open: Vec<(String, u16, u64)> = self
            .pdus
            .iter()
            .flat_map(|(pdu, st)| {
                st.sockets
                    .iter()
                    .filter(|(_, s)| s.pending.is_some())
                    .map(move |(socket, _)| (pdu.clone(), *socket, st.last_ts))
            })
            .collect();
        for (pdu, socket, ts) in open {
            if let Some(r) = self.close_pending(&pdu, socket, None, ts) {
                self.emit_isolation(&pdu, r, &mut out);
            }
        }
        if let Err(e) = self.store.flush() {
            out.push(PipelineOutput::Warning {
                pdu_id: String::new(),
                ts_ms: 0,
                message: format!("store flush failed: {e}"),
            });
        }
        out
    }

    /// Count of isolations per verdict seen in `outputs`; a small helper
    /// for summaries.
    pub fn summarize(outputs: &[PipelineOutput]) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for o in outputs {
            let key = match o {
                PipelineOutput::Isolation(r) => {
                    format!("{} ({})", r.event.chosen, r.verdict.as_str())
                }
                PipelineOutput::Detection(e) if e.chosen == ChangeClass::Unknown => {
                    "Unknown (unresolved)".to_string()
                }
                PipelineOutput::Correction(c) => format!("{} (correction)", c.corrected_class),
                PipelineOutput::UnknownDevice(_) => "UnknownDevice".to_string(),
                _ => continue,
            };
            *m.entry(key).or_insert(0) += 1;
        }
        m
    }
}

fn push_trimmed(buf: &mut VecDeque<SeriesPoint>, p: SeriesPoint, keep: usize) {
    while buf.len() >= keep {
        buf.pop_front();
    }
    buf.push_back(p);
}
