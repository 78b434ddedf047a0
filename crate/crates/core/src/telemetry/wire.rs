//! One-line JSON encoding of a probe:
//!
//! ```text
//! {"pdu":"pdu1","ts_ms":1000,"sockets":[{"id":1,"mA":500,"V":120.0,"pf":0.9}],"total":{"mA":500,"V":120.0,"pf":0.9}}
//! ```
//!
//! Decimals carry at most three fractional digits and are parsed from their
//! textual form, never through a float.

use serde::Deserialize;
use serde_json::value::RawValue;
use thiserror::Error;

use super::{ProbeResponse, SocketSample};
use crate::units::{format_milli, Power};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("malformed probe record at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid probe field `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ProbeError {
    pub(crate) fn validation(field: &str, message: impl Into<String>) -> Self {
        ProbeError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireProbe<'a> {
    pdu: String,
    ts_ms: u64,
    #[serde(borrow)]
    sockets: Vec<WireSocket<'a>>,
    #[serde(borrow)]
    total: WireTotal<'a>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSocket<'a> {
    id: u16,
    #[serde(rename = "mA")]
    milliamps: u32,
    #[serde(rename = "V", borrow)]
    volts: &'a RawValue,
    #[serde(borrow)]
    pf: &'a RawValue,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTotal<'a> {
    #[serde(rename = "mA")]
    milliamps: u32,
    #[serde(rename = "V", borrow)]
    volts: &'a RawValue,
    #[serde(borrow)]
    pf: &'a RawValue,
}

/// Parses one record. Trailing `\r`/`\n` are ignored.
pub fn parse_probe(line: &[u8]) -> Result<ProbeResponse, ProbeError> {
    let trimmed = trim_line_end(line);
    let wire: WireProbe<'_> = serde_json::from_slice(trimmed).map_err(|e| ProbeError::Parse {
        offset: json_error_offset(trimmed, &e),
        message: e.to_string(),
    })?;

    let mut sockets = Vec::with_capacity(wire.sockets.len());
    for s in &wire.sockets {
        sockets.push(SocketSample {
            socket_id: s.id,
            current_milliamps: s.milliamps,
            voltage_mv: decimal_field(trimmed, s.volts, "V")?,
            power_factor_milli: pf_field(trimmed, s.pf)?,
        });
    }
    let total = SocketSample {
        socket_id: 0,
        current_milliamps: wire.total.milliamps,
        voltage_mv: decimal_field(trimmed, wire.total.volts, "V")?,
        power_factor_milli: pf_field(trimmed, wire.total.pf)?,
    };
    let probe = ProbeResponse {
        pdu_id: wire.pdu,
        timestamp_ms: wire.ts_ms,
        sockets,
        total,
    };
    probe.validate()?;
    Ok(probe)
}

/// Encodes one record (without the trailing newline). Refuses probes whose
/// aggregate differs from the socket sum by more than `aggregate_tolerance`.
pub fn encode_probe(p: &ProbeResponse, aggregate_tolerance: Power) -> Result<Vec<u8>, ProbeError> {
    p.validate()?;
    p.check_aggregate(aggregate_tolerance)?;
    let mut out = String::with_capacity(64 + 48 * p.sockets.len());
    out.push_str("{\"pdu\":");
    out.push_str(&serde_json::to_string(&p.pdu_id).expect("string serialization"));
    out.push_str(&format!(",\"ts_ms\":{},\"sockets\":[", p.timestamp_ms));
    for (i, s) in p.sockets.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!(
            "{{\"id\":{},\"mA\":{},\"V\":{},\"pf\":{}}}",
            s.socket_id,
            s.current_milliamps,
            format_milli(s.voltage_mv as i64),
            format_milli(s.power_factor_milli as i64)
        ));
    }
    out.push_str(&format!(
        "],\"total\":{{\"mA\":{},\"V\":{},\"pf\":{}}}}}",
        p.total.current_milliamps,
        format_milli(p.total.voltage_mv as i64),
        format_milli(p.total.power_factor_milli as i64)
    ));
    Ok(out.into_bytes())
}

fn trim_line_end(line: &[u8]) -> &[u8] {
    let mut end = line.len();
    while end > 0 && matches!(line[end - 1], b'\n' | b'\r') {
        end -= 1;
    }
    &line[..end]
}

fn json_error_offset(input: &[u8], err: &serde_json::Error) -> usize {
    if err.is_eof() {
        return input.len();
    }
    // Records are single-line, so the column locates the byte.
    let mut line = 1;
    let mut offset = 0;
    for (i, b) in input.iter().enumerate() {
        if line == err.line() {
            offset = i;
            break;
        }
        if *b == b'\n' {
            line += 1;
        }
    }
    (offset + err.column().saturating_sub(1)).min(input.len())
}

fn raw_offset(input: &[u8], raw: &RawValue) -> usize {
    (raw.get().as_ptr() as usize).saturating_sub(input.as_ptr() as usize)
}

fn parse_milli(text: &str) -> Option<i64> {
    let (neg, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty()
        || !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
        || frac_part.len() > 3
        || (digits.contains('.') && frac_part.is_empty())
    {
        return None;
    }
    let int: i64 = int_part.parse().ok()?;
    let mut frac: i64 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().ok()?
    };
    for _ in frac_part.len()..3 {
        frac *= 10;
    }
    let v = int.checked_mul(1000)?.checked_add(frac)?;
    Some(if neg { -v } else { v })
}

fn decimal_field(input: &[u8], raw: &RawValue, field: &str) -> Result<u32, ProbeError> {
    let v = parse_milli(raw.get()).ok_or_else(|| ProbeError::Parse {
        offset: raw_offset(input, raw),
        message: format!("`{field}` must be a decimal with at most 3 fractional digits"),
    })?;
    if v <= 0 {
        return Err(ProbeError::validation(field, "voltage must be > 0"));
    }
    u32::try_from(v).map_err(|_| ProbeError::validation(field, "value out of range"))
}

fn pf_field(input: &[u8], raw: &RawValue) -> Result<u16, ProbeError> {
    let v = parse_milli(raw.get()).ok_or_else(|| ProbeError::Parse {
        offset: raw_offset(input, raw),
        message: "`pf` must be a decimal with at most 3 fractional digits".to_string(),
    })?;
    if v <= 0 || v > 1000 {
        return Err(ProbeError::validation(
            "power_factor",
            format!("power factor {} outside (0, 1]", format_milli(v)),
        ));
    }
    Ok(v as u16)
}
