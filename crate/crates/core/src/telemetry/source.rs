use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::{parse_probe, PollConfig, ProbeError, ProbeResponse};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SourceError {
    #[error("source configuration: {0}")]
    Config(String),
    #[error("PDU `{0}` is not served by this source")]
    UnknownPdu(String),
    #[error("PDU `{pdu}` read failed: {message}")]
    Read { pdu: String, message: String },
    #[error("hardware access is not available: {0}")]
    Unsupported(String),
    #[error("trace line {line}: {source}")]
    Trace {
        line: usize,
        #[source]
        source: ProbeError,
    },
}

/// Outcome of asking a source for one PDU at one poll instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceRead {
    Probe(ProbeResponse),
    /// No response this period; the poller records a gap.
    Stalled,
    /// The source has no more data for this PDU.
    Exhausted,
}

/// Anything that can answer probes for a set of PDUs: the simulator, a
/// recorded trace, or a hardware client.
pub trait PowerSource {
    fn pdu_ids(&self) -> Vec<String>;

    /// Timestamp of the first poll instant.
    fn start_ms(&self) -> u64;

    fn read(&mut self, pdu_id: &str, poll_ts_ms: u64) -> Result<SourceRead, SourceError>;
}

/// Items of a polled stream, ordered per PDU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollEvent {
    Probe(ProbeResponse),
    /// A poll that produced no response; never filled with fabricated samples.
    Gap {
        pdu_id: String,
        ts_ms: u64,
    },
    /// A failing PDU. Polling continues for it and for every other PDU.
    SourceError {
        pdu_id: String,
        ts_ms: u64,
        message: String,
    },
}

impl PollEvent {
    pub fn pdu_id(&self) -> &str {
        match self {
            PollEvent::Probe(p) => &p.pdu_id,
            PollEvent::Gap { pdu_id, .. } | PollEvent::SourceError { pdu_id, .. } => pdu_id,
        }
    }
}

/// Virtual-clock schedule: each call to [`PollSchedule::tick`] polls every
/// live PDU once at the next instant.
#[derive(Debug, Clone)]
pub struct PollSchedule {
    cfg: PollConfig,
    next_ts: u64,
    finished: BTreeSet<String>,
    last_emitted: BTreeMap<String, u64>,
}

impl PollSchedule {
    pub fn new(cfg: PollConfig, start_ms: u64) -> Self {
        PollSchedule {
            cfg,
            next_ts: start_ms,
            finished: BTreeSet::new(),
            last_emitted: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &PollConfig {
        &self.cfg
    }

    pub fn next_ts(&self) -> u64 {
        self.next_ts
    }

    pub fn is_finished(&self) -> bool {
        self.cfg.pdu_ids.iter().all(|p| self.finished.contains(p))
    }

    /// Polls one instant. Returns `None` once every PDU is exhausted.
    pub fn tick(&mut self, source: &mut dyn PowerSource) -> Option<Vec<PollEvent>> {
        if self.is_finished() {
            return None;
        }
        let ts = self.next_ts;
        self.next_ts += self.cfg.period_ms;
        let mut out = Vec::new();
        for pdu in &self.cfg.pdu_ids {
            if self.finished.contains(pdu) {
                continue;
            }
            match source.read(pdu, ts) {
                Ok(SourceRead::Probe(p)) => {
                    let last = self.last_emitted.get(pdu).copied();
                    if p.pdu_id != *pdu || last.is_some_and(|l| p.timestamp_ms <= l) {
                        out.push(PollEvent::SourceError {
                            pdu_id: pdu.clone(),
                            ts_ms: ts,
                            message: format!(
                                "out-of-order or foreign probe (pdu `{}`, ts {})",
                                p.pdu_id, p.timestamp_ms
                            ),
                        });
                    } else {
                        self.last_emitted.insert(pdu.clone(), p.timestamp_ms);
                        out.push(PollEvent::Probe(p));
                    }
                }
                Ok(SourceRead::Stalled) => out.push(PollEvent::Gap {
                    pdu_id: pdu.clone(),
                    ts_ms: ts,
                }),
                Ok(SourceRead::Exhausted) => {
                    self.finished.insert(pdu.clone());
                }
                Err(e) => out.push(PollEvent::SourceError {
                    pdu_id: pdu.clone(),
                    ts_ms: ts,
                    message: e.to_string(),
                }),
            }
        }
        if out.is_empty() && self.is_finished() {
            return None;
        }
        Some(out)
    }
}

/// Iterator over a source's poll stream. Completes cleanly when every PDU is
/// exhausted.
pub struct Poller<'a, S: PowerSource + ?Sized> {
    source: &'a mut S,
    schedule: PollSchedule,
    pending: VecDeque<PollEvent>,
}

impl<S: PowerSource + ?Sized> Iterator for Poller<'_, S> {
    type Item = PollEvent;

    fn next(&mut self) -> Option<PollEvent> {
        loop {
            if let Some(e) = self.pending.pop_front() {
                return Some(e);
            }
            let batch = self.schedule.tick(&mut DynSource(self.source))?;
            self.pending.extend(batch);
        }
    }
}

struct DynSource<'a, S: PowerSource + ?Sized>(&'a mut S);

impl<S: PowerSource + ?Sized> PowerSource for DynSource<'_, S> {
    fn pdu_ids(&self) -> Vec<String> {
        self.0.pdu_ids()
    }
    fn start_ms(&self) -> u64 {
        self.0.start_ms()
    }
    fn read(&mut self, pdu_id: &str, poll_ts_ms: u64) -> Result<SourceRead, SourceError> {
        self.0.read(pdu_id, poll_ts_ms)
    }
}

/// Polls `source` on `cfg`'s schedule, starting at the source's first instant.
/// An empty `cfg.pdu_ids` means every PDU the source serves.
pub fn poll<S: PowerSource + ?Sized>(source: &mut S, cfg: PollConfig) -> Poller<'_, S> {
    let mut cfg = cfg;
    if cfg.pdu_ids.is_empty() {
        cfg.pdu_ids = source.pdu_ids();
    }
    let schedule = PollSchedule::new(cfg, source.start_ms());
    Poller {
        source,
        schedule,
        pending: VecDeque::new(),
    }
}

/// Replays a `.ptrace` file. A record answers the poll instant whose period
/// contains its timestamp; instants with no record are gaps.
#[derive(Debug, Clone)]
pub struct TraceSource {
    per_pdu: BTreeMap<String, VecDeque<ProbeResponse>>,
    start_ms: u64,
    period_ms: u64,
    last_poll: BTreeMap<String, u64>,
    /// First unreadable line, if the trace was cut short or malformed.
    pub error: Option<SourceError>,
    /// True when the only problem is an unterminated final line.
    pub truncated: bool,
}

impl TraceSource {
    /// Parses the valid prefix of a trace. Parsing stops at the first bad
    /// line, which is kept in [`TraceSource::error`].
    pub fn from_bytes(data: &[u8]) -> Self {
        let mut per_pdu: BTreeMap<String, VecDeque<ProbeResponse>> = BTreeMap::new();
        let mut error = None;
        let mut truncated = false;
        let mut offset = 0usize;
        let mut line_no = 0usize;
        while offset < data.len() {
            line_no += 1;
            let rest = &data[offset..];
            let (line, consumed, terminated) = match rest.iter().position(|b| *b == b'\n') {
                Some(i) => (&rest[..i], i + 1, true),
                None => (rest, rest.len(), false),
            };
            let line_start = offset;
            offset += consumed;
            if line.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            match parse_probe(line) {
                Ok(p) => {
                    let q = per_pdu.entry(p.pdu_id.clone()).or_default();
                    if q.back()
                        .is_some_and(|last| last.timestamp_ms >= p.timestamp_ms)
                    {
                        error = Some(SourceError::Trace {
                            line: line_no,
                            source: ProbeError::Validation {
                                field: "ts_ms".into(),
                                message: format!(
                                    "timestamp {} does not increase for pdu `{}`",
                                    p.timestamp_ms, p.pdu_id
                                ),
                            },
                        });
                        break;
                    }
                    q.push_back(p);
                }
                Err(e) => {
                    let e = match e {
                        ProbeError::Parse { offset, message } => ProbeError::Parse {
                            offset: line_start + offset,
                            message,
                        },
                        other => other,
                    };
                    truncated = !terminated;
                    error = Some(SourceError::Trace {
                        line: line_no,
                        source: e,
                    });
                    break;
                }
            }
        }
        let start_ms = per_pdu
            .values()
            .filter_map(|q| q.front().map(|p| p.timestamp_ms))
            .min()
            .unwrap_or(0);
        let period_ms = per_pdu
            .values()
            .flat_map(|q| {
                q.iter()
                    .zip(q.iter().skip(1))
                    .map(|(a, b)| b.timestamp_ms - a.timestamp_ms)
            })
            .min()
            .unwrap_or(1000)
            .max(PollConfig::MIN_PERIOD_MS);
        TraceSource {
            per_pdu,
            start_ms,
            period_ms,
            last_poll: BTreeMap::new(),
            error,
            truncated,
        }
    }

    pub fn from_path(path: &std::path::Path) -> std::io::Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?))
    }

    /// Smallest spacing between consecutive records of one PDU.
    pub fn suggested_period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn record_count(&self) -> usize {
        self.per_pdu.values().map(VecDeque::len).sum()
    }
}

impl PowerSource for TraceSource {
    fn pdu_ids(&self) -> Vec<String> {
        self.per_pdu.keys().cloned().collect()
    }

    fn start_ms(&self) -> u64 {
        self.start_ms
    }

    fn read(&mut self, pdu_id: &str, poll_ts_ms: u64) -> Result<SourceRead, SourceError> {
        // The answer window is the poller's own cadence once it is known.
        let period = match self.last_poll.insert(pdu_id.to_string(), poll_ts_ms) {
            Some(prev) if poll_ts_ms > prev => poll_ts_ms - prev,
            _ => self.period_ms,
        };
        let q = self
            .per_pdu
            .get_mut(pdu_id)
            .ok_or_else(|| SourceError::UnknownPdu(pdu_id.to_string()))?;
        // Drop records that fell before this instant (misaligned timestamps).
        while q.front().is_some_and(|p| p.timestamp_ms < poll_ts_ms) {
            q.pop_front();
        }
        match q.front() {
            None => Ok(SourceRead::Exhausted),
            Some(p) if p.timestamp_ms < poll_ts_ms + period => {
                Ok(SourceRead::Probe(q.pop_front().expect("front exists")))
            }
            Some(_) => Ok(SourceRead::Stalled),
        }
    }
}

/// Placeholder for a Raritan SNMP client. Every read fails with
/// [`SourceError::Unsupported`].
#[derive(Debug, Clone)]
pub struct HardwareSource {
    pub pdu_ids: Vec<String>,
    pub start_ms: u64,
}

impl PowerSource for HardwareSource {
    fn pdu_ids(&self) -> Vec<String> {
        self.pdu_ids.clone()
    }

    fn start_ms(&self) -> u64 {
        self.start_ms
    }

    fn read(&mut self, pdu_id: &str, _poll_ts_ms: u64) -> Result<SourceRead, SourceError> {
        Err(SourceError::Unsupported(format!(
            "no SNMP client for PDU `{pdu_id}`"
        )))
    }
}
