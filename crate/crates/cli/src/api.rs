//! HTTP API: PDU and socket views, device history, events, the CSV report,
//! a server-sent live stream and simulator fault injection.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, oneshot};
use wattsentinel_core::powermodel::expected_power;
use wattsentinel_core::simulator::Action;
use wattsentinel_core::store::{DetectionRecord, HistoryRecord, Payload, RecordKey, RecordKind};
use wattsentinel_core::ChangeClass;

use crate::monitor::{LiveMessage, Shared};

/// Error body: a machine-readable code and a human-readable message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/pdus", get(pdus))
        .route("/api/pdus/{id}/sockets", get(sockets))
        .route("/api/devices/{id}/history", get(history))
        .route("/api/events", get(events))
        .route("/api/report.csv", get(report))
        .route("/api/live", get(live))
        .route("/api/sim/fault", post(fault))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(shared)
}

/// `from` and `to` in epoch milliseconds, both inclusive and optional.
#[derive(Debug, Default, Deserialize)]
struct WindowParams {
    from: Option<String>,
    to: Option<String>,
}

impl WindowParams {
    fn range(&self) -> ApiResult<(u64, u64)> {
        let parse = |name: &str, v: &Option<String>, default: u64| match v {
            None => Ok(default),
            Some(s) => s.trim().parse::<u64>().map_err(|_| {
                ApiError::bad_request(
                    "bad_range",
                    format!("`{name}` must be epoch milliseconds, got `{s}`"),
                )
            }),
        };
        let from = parse("from", &self.from, 0)?;
        let to = parse("to", &self.to, u64::MAX)?;
        if from > to {
            return Err(ApiError::bad_request("bad_range", "`from` is after `to`"));
        }
        Ok((from, to))
    }
}

async fn health(State(s): State<Arc<Shared>>) -> Json<serde_json::Value> {
    let exhausted = s.status.read().unwrap().exhausted;
    Json(json!({
        "status": "ok",
        "source": s.config.source,
        "simulated": s.is_simulated(),
        "source_exhausted": exhausted,
        "store_records": s.store.len(),
        "store_degraded": s.store.is_degraded(),
        "config": s.config,
    }))
}

#[derive(Debug, Serialize)]
struct PduView {
    id: String,
    sockets: Vec<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ts_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_w: Option<f64>,
}

async fn pdus(State(s): State<Arc<Shared>>) -> Json<Vec<PduView>> {
    let status = s.status.read().unwrap();
    let views = s
        .topology
        .pdu_ids()
        .into_iter()
        .map(|id| {
            let latest = status.latest.get(&id);
            let sockets = s
                .topology
                .devices()
                .filter(|d| d.pdu == id)
                .map(|d| d.socket)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            PduView {
                sockets,
                ts_ms: latest.map(|l| l.ts_ms),
                total_w: latest.map(|l| l.total_w),
                id,
            }
        })
        .collect();
    Json(views)
}

#[derive(Debug, Serialize)]
struct SocketView {
    socket: u16,
    #[serde(skip_serializing_if = "Option::is_none")]
    device: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    registered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    power_w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_w: Option<f64>,
    /// The monitor's view of the device configuration, not ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    inferred_state: Option<wattsentinel_core::DeviceStateSnapshot>,
}

async fn sockets(
    State(s): State<Arc<Shared>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<SocketView>>> {
    if !s.topology.pdu_ids().contains(&id) {
        return Err(ApiError::not_found(format!("unknown PDU `{id}`")));
    }
    let status = s.status.read().unwrap();
    let measured: BTreeMap<u16, f64> = status
        .latest
        .get(&id)
        .map(|l| l.sockets.iter().map(|r| (r.socket, r.power_w)).collect())
        .unwrap_or_default();
    let mut views: BTreeMap<u16, SocketView> = BTreeMap::new();
    for d in s.topology.devices().filter(|d| d.pdu == id) {
        let reg = status.registry.device(&d.id);
        views.insert(
            d.socket,
            SocketView {
                socket: d.socket,
                device: Some(d.id.clone()),
                class: Some(d.class.as_str().to_string()),
                registered: reg.is_some(),
                power_w: measured.get(&d.socket).copied(),
                expected_w: reg
                    .and_then(|r| expected_power(&r.model, &r.state).ok())
                    .map(|p| p.watts()),
                inferred_state: reg.map(|r| r.state.clone()),
            },
        );
    }
    for (socket, power) in measured {
        views.entry(socket).or_insert(SocketView {
            socket,
            device: None,
            class: None,
            registered: false,
            power_w: Some(power),
            expected_w: None,
            inferred_state: None,
        });
    }
    Ok(Json(views.into_values().collect()))
}

#[derive(Debug, Serialize)]
struct Sample {
    ts_ms: u64,
    power_w: f64,
}

async fn history(
    State(s): State<Arc<Shared>>,
    Path(id): Path<String>,
    Query(w): Query<WindowParams>,
) -> ApiResult<Json<serde_json::Value>> {
    let (from, to) = w.range()?;
    let d = s
        .topology
        .device(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown device `{id}`")))?;
    let key = RecordKey::Socket {
        pdu: d.pdu.clone(),
        socket: d.socket,
    };
    let samples: Vec<Sample> = s
        .store
        .query_window(&key, RecordKind::PowerSocket, from, to)
        .into_iter()
        .filter_map(|r| match r.payload {
            Payload::PowerSocket { power_w, .. } => Some(Sample {
                ts_ms: r.ts_ms,
                power_w: power_w.watts(),
            }),
            _ => None,
        })
        .collect();
    Ok(Json(json!({
        "device": d.id,
        "pdu": d.pdu,
        "socket": d.socket,
        "samples": samples,
    })))
}

/// Report-bearing records in the window, ascending by time: isolations,
/// corrections, unclassified changes and unknown devices. Detections still
/// awaiting verification appear only on the live stream.
async fn events(
    State(s): State<Arc<Shared>>,
    Query(w): Query<WindowParams>,
) -> ApiResult<Json<Vec<HistoryRecord>>> {
    let (from, to) = w.range()?;
    let mut out: Vec<HistoryRecord> = [
        RecordKind::Detection,
        RecordKind::Isolation,
        RecordKind::Correction,
    ]
    .into_iter()
    .flat_map(|k| s.store.records_of_kind(k, from, to))
    .filter(|r| match &r.payload {
        Payload::Detection(DetectionRecord::Event(e)) => e.chosen == ChangeClass::Unknown,
        _ => true,
    })
    .collect();
    out.sort_by_key(|r| r.ts_ms);
    Ok(Json(out))
}

async fn report(
    State(s): State<Arc<Shared>>,
    Query(w): Query<WindowParams>,
) -> ApiResult<Response> {
    let (from, to) = w.range()?;
    let body = s.store.export_report(from, to);
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8"),
            (
                header::CONTENT_DISPOSITION,
                "attachment; filename=\"report.csv\"",
            ),
        ],
        body,
    )
        .into_response())
}

/// Server-sent events. A subscriber that falls more than the live buffer
/// behind receives a final `dropped` event and is disconnected; the monitor
/// loop never waits on it.
async fn live(State(s): State<Arc<Shared>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    Sse::new(live_stream(s.live.subscribe())).keep_alive(KeepAlive::default())
}

fn live_stream(
    rx: broadcast::Receiver<LiveMessage>,
) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(Some(rx), |rx| async move {
        let mut rx = rx?;
        match rx.recv().await {
            Ok(msg) => {
                let event = Event::default()
                    .event(msg.event_name())
                    .json_data(&msg)
                    .unwrap_or_else(|e| Event::default().event("error").data(e.to_string()));
                Some((Ok(event), Some(rx)))
            }
            Err(broadcast::error::RecvError::Lagged(n)) => {
                let event = Event::default()
                    .event("dropped")
                    .data(format!("{{\"missed\":{n}}}"));
                Some((Ok(event), None))
            }
            Err(broadcast::error::RecvError::Closed) => None,
        }
    })
}

#[derive(Debug, Deserialize)]
struct FaultBody {
    /// One scenario action without its time, e.g. `port_down sw1 3`.
    action: String,
}

async fn fault(
    State(s): State<Arc<Shared>>,
    body: Result<Json<FaultBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let Some(tx) = &s.faults else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_simulated",
            "fault injection needs a simulator-backed service",
        ));
    };
    let Json(body) = body.map_err(|e| ApiError::bad_request("bad_body", e.body_text()))?;
    let action = Action::parse(&body.action)
        .and_then(|a| a.check_targets(&s.topology).map(|_| a))
        .map_err(|e| ApiError::bad_request("invalid_action", e))?;
    let text = action.to_string();
    let (reply, answer) = oneshot::channel();
    let unavailable = || {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "monitor_stopped",
            "the monitor loop is not running",
        )
    };
    tx.send((action, reply)).await.map_err(|_| unavailable())?;
    let applies_at = answer
        .await
        .map_err(|_| unavailable())?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "rejected_action", e))?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "action": text, "applies_at_ms": applies_at })),
    ))
}
