//! Append-only history of power samples, state snapshots, detections,
//! isolations and corrections, with windowed queries and CSV export.
//!
//! Records are kept in memory and, when opened on a path, appended to a
//! JSON-lines file before the append is acknowledged.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fdi::{ChangeClass, Correction, DetectionEvent, IsolationResult, UnknownDevice};
use crate::powermodel::DeviceStateSnapshot;
use crate::units::Power;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {path} at line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid record: {0}")]
    Validation(String),
    #[error("a different {kind:?} record already exists for {key} at {ts_ms}")]
    Conflict {
        kind: RecordKind,
        key: RecordKey,
        ts_ms: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    PowerTotal,
    PowerSocket,
    StateSnapshot,
    Detection,
    Isolation,
    Correction,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKey {
    Pdu(String),
    Socket { pdu: String, socket: u16 },
    Device(String),
}

impl std::fmt::Display for RecordKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecordKey::Pdu(p) => write!(f, "pdu {p}"),
            RecordKey::Socket { pdu, socket } => write!(f, "socket {pdu}/{socket}"),
            RecordKey::Device(d) => write!(f, "device {d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionRecord {
    Event(DetectionEvent),
    UnknownDevice(UnknownDevice),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum Payload {
    PowerTotal {
        power_w: Power,
    },
    PowerSocket {
        power_w: Power,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device_id: Option<String>,
    },
    StateSnapshot(DeviceStateSnapshot),
    Detection(DetectionRecord),
    Isolation(IsolationResult),
    Correction(Correction),
}

impl Payload {
    pub fn kind(&self) -> RecordKind {
        match self {
            Payload::PowerTotal { .. } => RecordKind::PowerTotal,
            Payload::PowerSocket { .. } => RecordKind::PowerSocket,
            Payload::StateSnapshot(_) => RecordKind::StateSnapshot,
            Payload::Detection(_) => RecordKind::Detection,
            Payload::Isolation(_) => RecordKind::Isolation,
            Payload::Correction(_) => RecordKind::Correction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub kind: RecordKind,
    pub key: RecordKey,
    pub ts_ms: u64,
    pub payload: Payload,
}

impl HistoryRecord {
    pub fn new(key: RecordKey, ts_ms: u64, payload: Payload) -> Self {
        HistoryRecord {
            kind: payload.kind(),
            key,
            ts_ms,
            payload,
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.kind != self.payload.kind() {
            return Err(StoreError::Validation(format!(
                "record kind {:?} carries a {:?} payload",
                self.kind,
                self.payload.kind()
            )));
        }
        let key_ok = matches!(
            (self.kind, &self.key),
            (RecordKind::PowerTotal, RecordKey::Pdu(_))
                | (RecordKind::PowerSocket, RecordKey::Socket { .. })
                | (
                    RecordKind::Detection,
                    RecordKey::Device(_) | RecordKey::Socket { .. }
                )
                | (
                    RecordKind::StateSnapshot | RecordKind::Isolation | RecordKind::Correction,
                    RecordKey::Device(_),
                )
        );
        if !key_ok {
            return Err(StoreError::Validation(format!(
                "{:?} records cannot be keyed by {}",
                self.kind, self.key
            )));
        }
        Ok(())
    }
}

/// One row of the exported change report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub ts_ms: u64,
    pub pdu: String,
    pub socket: u16,
    pub device: String,
    pub class: String,
    pub verdict: String,
    pub amplitude_w: String,
    pub duration_s: String,
    pub ambiguous: bool,
    pub narrative: String,
    #[serde(skip)]
    order: u8,
}

pub const REPORT_HEADER: &str =
    "ts_ms,pdu,socket,device,class,verdict,amplitude_w,duration_s,ambiguous,narrative";

#[derive(Default)]
struct Inner {
    records: Vec<HistoryRecord>,
    by_key: BTreeMap<(RecordKind, RecordKey), Vec<usize>>,
    unique: HashMap<(RecordKind, RecordKey, u64), usize>,
    file: Option<(PathBuf, File)>,
    degraded: bool,
}

impl Inner {
    fn insert(&mut self, record: HistoryRecord) -> Result<bool, StoreError> {
        let ukey = (record.kind, record.key.clone(), record.ts_ms);
        if let Some(&idx) = self.unique.get(&ukey) {
            if self.records[idx] == record {
                return Ok(false);
            }
            return Err(StoreError::Conflict {
                kind: record.kind,
                key: record.key,
                ts_ms: record.ts_ms,
            });
        }
        let idx = self.records.len();
        self.by_key
            .entry((record.kind, record.key.clone()))
            .or_default()
            .push(idx);
        self.unique.insert(ukey, idx);
        self.records.push(record);
        Ok(true)
    }
}

/// Thread-safe store: concurrent readers, one writer at a time.
pub struct Store {
    inner: RwLock<Inner>,
}

impl Default for Store {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.read();
        f.debug_struct("Store")
            .field("records", &inner.records.len())
            .field("path", &inner.file.as_ref().map(|f| &f.0))
            .field("degraded", &inner.degraded)
            .finish()
    }
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            inner: RwLock::new(Inner::default()),
        }
    }

    /// Opens (or creates) a store file, loading any records already in it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let mut inner = Inner::default();
        if path.is_file() {
            let reader = BufReader::new(File::open(&path).map_err(io)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |message: String| StoreError::Corrupt {
                    path: path.clone(),
                    line: n + 1,
                    message,
                };
                let record: HistoryRecord =
                    serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                record.validate().map_err(|e| corrupt(e.to_string()))?;
                inner.insert(record).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        inner.file = Some((path, file));
        Ok(Store {
            inner: RwLock::new(inner),
        })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends a record. Exact duplicates are accepted once. When the
    /// backing file fails, the record is still kept in memory, the store
    /// switches to memory-only operation and the I/O error is returned.
    pub fn append(&self, record: HistoryRecord) -> Result<(), StoreError> {
        record.validate()?;
        let mut inner = self.write();
        let line = if inner.file.is_some() && !inner.degraded {
            let mut l =
                serde_json::to_vec(&record).map_err(|e| StoreError::Validation(e.to_string()))?;
            l.push(b'\n');
            Some(l)
        } else {
            None
        };
        if !inner.insert(record)? {
            return Ok(());
        }
        if let (Some(line), Some((path, file))) = (line, inner.file.as_mut()) {
            if let Err(source) = file.write_all(&line).and_then(|_| file.flush()) {
                let path = path.clone();
                inner.degraded = true;
                return Err(StoreError::Io { path, source });
            }
        }
        Ok(())
    }

    /// True once a file write has failed.
    pub fn is_degraded(&self) -> bool {
        self.read().degraded
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        let mut inner = self.write();
        if inner.degraded {
            return Ok(());
        }
        if let Some((path, file)) = inner.file.as_mut() {
            file.sync_data().map_err(|source| StoreError::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.read().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records for one key and kind with `from <= ts <= to`, ascending by
    /// timestamp (append order among equal timestamps).
    pub fn query_window(
        &self,
        key: &RecordKey,
        kind: RecordKind,
        from_ms: u64,
        to_ms: u64,
    ) -> Vec<HistoryRecord> {
        let inner = self.read();
        let Some(idxs) = inner.by_key.get(&(kind, key.clone())) else {
            return Vec::new();
        };
        let mut out: Vec<(u64, usize)> = idxs
            .iter()
            .map(|&i| (inner.records[i].ts_ms, i))
            .filter(|(ts, _)| (from_ms..=to_ms).contains(ts))
            .collect();
        out.sort_unstable();
        out.into_iter()
            .map(|(_, i)| inner.records[i].clone())
            .collect()
    }

    /// All records of `kind` in the window, ascending by timestamp.
    pub fn records_of_kind(
        &self,
        kind: RecordKind,
        from_ms: u64,
        to_ms: u64,
    ) -> Vec<HistoryRecord> {
        let inner = self.read();
        let mut out: Vec<(u64, usize)> = inner
            .by_key
            .range((kind, RecordKey::Pdu(String::new()))..)
            .take_while(|((k, _), _)| *k == kind)
            .flat_map(|(_, idxs)| idxs.iter().copied())
            .map(|i| (inner.records[i].ts_ms, i))
            .filter(|(ts, _)| (from_ms..=to_ms).contains(ts))
            .collect();
        out.sort_unstable();
        out.into_iter()
            .map(|(_, i)| inner.records[i].clone())
            .collect()
    }

    /// Keys that have at least one record of `kind`.
    pub fn keys(&self, kind: RecordKind) -> Vec<RecordKey> {
        self.read()
            .by_key
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, key)| key.clone())
            .collect()
    }

    /// Report rows with `from <= ts <= to`, ordered by timestamp, socket,
    /// record kind and device.
    pub fn report_rows(&self, from_ms: u64, to_ms: u64) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let everything = |kind| self.records_of_kind(kind, 0, u64::MAX);
        for rec in everything(RecordKind::Isolation) {
            if let Payload::Isolation(r) = rec.payload {
                rows.push(event_row(&r.event, r.verdict.as_str(), &r.narrative, 0));
            }
        }
        for rec in everything(RecordKind::Detection) {
            match rec.payload {
                Payload::Detection(DetectionRecord::Event(e))
                    if e.chosen == ChangeClass::Unknown =>
                {
                    let narrative = format!(
                        "unclassified {} of {:+.3} W on {}",
                        e.feature.kind, e.feature.amplitude_w, e.device_id
                    );
                    rows.push(event_row(&e, "unresolved", &narrative, 1));
                }
                Payload::Detection(DetectionRecord::UnknownDevice(u)) => rows.push(ReportRow {
                    ts_ms: u.ts_ms,
                    pdu: u.pdu_id.clone(),
                    socket: u.socket_id,
                    device: String::new(),
                    class: ChangeClass::Unknown.to_string(),
                    verdict: "unresolved".into(),
                    amplitude_w: format!("{:.3}", u.power_w.watts()),
                    duration_s: String::new(),
                    ambiguous: false,
                    narrative: u.narrative.clone(),
                    order: 2,
                }),
                _ => {}
            }
        }
        for rec in everything(RecordKind::Correction) {
            if let Payload::Correction(c) = rec.payload {
                rows.push(ReportRow {
                    ts_ms: c.ts_ms,
                    pdu: c.pdu_id.clone(),
                    socket: c.socket_id,
                    device: c.device_id.clone(),
                    class: c.corrected_class.to_string(),
                    verdict: "correction".into(),
                    amplitude_w: format!("{:.3}", c.amplitude_w),
                    duration_s: String::new(),
                    ambiguous: false,
                    narrative: c.narrative.clone(),
                    order: 3,
                });
            }
        }
        rows.retain(|r| (from_ms..=to_ms).contains(&r.ts_ms));
        rows.sort_by(|a, b| {
            (a.ts_ms, a.socket, a.order, &a.device, &a.pdu)
                .cmp(&(b.ts_ms, b.socket, b.order, &b.device, &b.pdu))
        });
        rows
    }

    /// CSV export of the change report. Deterministic for identical history.
    pub fn export_report(&self, from_ms: u64, to_ms: u64) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut out = Vec::new();
        out.extend_from_slice(REPORT_HEADER.as_bytes());
        out.push(b'\n');
        for row in self.report_rows(from_ms, to_ms) {
            w.serialize(&row).expect("in-memory CSV write");
        }
        out.extend(w.into_inner().expect("in-memory CSV flush"));
        out
    }
}

fn event_row(e: &DetectionEvent, verdict: &str, narrative: &str, order: u8) -> ReportRow {
    ReportRow {
        ts_ms: e.detected_at_ms,
        pdu: e.pdu_id.clone(),
        socket: e.socket_id,
        device: e.device_id.clone(),
        class: e.chosen.to_string(),
        verdict: verdict.to_string(),
        amplitude_w: format!("{:.3}", e.feature.amplitude_w),
        duration_s: e
            .feature
            .duration_s
            .map(|d| format!("{d:.3}"))
            .unwrap_or_default(),
        ambiguous: e.ambiguous,
        narrative: narrative.to_string(),
        order,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn power(pdu: &str, ts: u64, w: f64) -> HistoryRecord {
        HistoryRecord::new(
            RecordKey::Pdu(pdu.into()),
            ts,
            Payload::PowerTotal {
                power_w: Power::from_watts(w),
            },
        )
    }

    #[test]
    fn duplicates_are_idempotent_and_conflicts_rejected() {
        let s = Store::in_memory();
        s.append(power("p", 1000, 45.8)).unwrap();
        s.append(power("p", 1000, 45.8)).unwrap();
        assert_eq!(s.len(), 1);
        assert!(matches!(
            s.append(power("p", 1000, 45.9)),
            Err(StoreError::Conflict { .. })
        ));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let s = Store::in_memory();
        let mut r = power("p", 1, 1.0);
        r.kind = RecordKind::Isolation;
        assert!(matches!(s.append(r), Err(StoreError::Validation(_))));
        let wrong_key = HistoryRecord::new(
            RecordKey::Device("d".into()),
            1,
            Payload::PowerTotal {
                power_w: Power::ZERO,
            },
        );
        assert!(matches!(
            s.append(wrong_key),
            Err(StoreError::Validation(_))
        ));
    }

    #[test]
    fn out_of_order_appends_query_sorted() {
        let s = Store::in_memory();
        for ts in [3000, 1000, 2000] {
            s.append(power("p", ts, ts as f64 / 1000.0)).unwrap();
        }
        let key = RecordKey::Pdu("p".into());
        let got: Vec<u64> = s
            .query_window(&key, RecordKind::PowerTotal, 0, u64::MAX)
            .iter()
            .map(|r| r.ts_ms)
            .collect();
        assert_eq!(got, vec![1000, 2000, 3000]);
        assert!(s
            .query_window(&key, RecordKind::PowerTotal, 1500, 1600)
            .is_empty());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        {
            let s = Store::open(&path).unwrap();
            s.append(power("p", 1000, 45.8)).unwrap();
            s.append(power("p", 2000, 45.45)).unwrap();
        }
        let s = Store::open(&path).unwrap();
        let recs = s.query_window(&RecordKey::Pdu("p".into()), RecordKind::PowerTotal, 0, 5000);
        assert_eq!(recs, vec![power("p", 1000, 45.8), power("p", 2000, 45.45)]);
    }

    #[test]
    fn write_failure_degrades_to_memory() {
        let full = Path::new("/dev/full");
        if !full.exists() {
            return;
        }
        let s = Store::open(full).unwrap();
        assert!(matches!(
            s.append(power("p", 1, 1.0)),
            Err(StoreError::Io { .. })
        ));
        assert!(s.is_degraded());
        s.append(power("p", 2, 1.0)).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn empty_report_is_header_only() {
        let s = Store::in_memory();
        assert_eq!(
            s.export_report(0, u64::MAX),
            format!("{REPORT_HEADER}\n").into_bytes()
        );
    }
}
