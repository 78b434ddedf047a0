use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use wattsentinel_cli::api::router;
use wattsentinel_cli::monitor::{LiveMessage, Shared, LIVE_BUFFER};
use wattsentinel_cli::{AppConfig, Monitor, SourceKind};
use wattsentinel_core::fdi::{FdiConfig, KnowledgeBase};
use wattsentinel_core::runner::simulate;
use wattsentinel_core::simulator::{load_script, SimConfig, Topology};
use wattsentinel_core::store::Store;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn topology() -> Topology {
    Topology::load(&scenarios().join("topology.toml")).unwrap()
}

/// A service over a store filled by a finished simulation, without a live
/// source.
fn replayed(scenario: &str) -> (Router, Arc<Shared>) {
    let topo = topology();
    let text = std::fs::read_to_string(scenarios().join(format!("{scenario}.txt"))).unwrap();
    let store = Arc::new(Store::in_memory());
    simulate(
        &topo,
        load_script(&text, &topo).unwrap(),
        SimConfig::default(),
        KnowledgeBase::default(),
        FdiConfig::default(),
        store.clone(),
    )
    .unwrap();
    let cfg = AppConfig {
        source: SourceKind::Trace,
        trace_path: Some("run.ptrace".into()),
        ..AppConfig::default()
    };
    let shared = Arc::new(Shared::new(cfg, topo, store, None));
    (router(shared.clone()), shared)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(
            body.map(|b| Body::from(b.to_string()))
                .unwrap_or_else(Body::empty),
        )
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, body) = call(app, "GET", uri, None).await;
    (status, serde_json::from_slice(&body).unwrap())
}

#[tokio::test]
async fn pdus_echo_the_topology() {
    let (app, _) = replayed("ii_port_down");
    let (status, body) = get_json(&app, "/api/pdus").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["pdu1", "pdu2"]);
    assert_eq!(body[0]["sockets"], serde_json::json!([1, 2, 3, 4, 5]));
}

#[tokio::test]
async fn sockets_of_a_pdu() {
    let (app, _) = replayed("ii_port_down");
    let (status, body) = get_json(&app, "/api/pdus/pdu2/sockets").await;
    assert_eq!(status, StatusCode::OK);
    let first = &body[0];
    assert_eq!(first["device"], "host1");
    assert_eq!(first["class"], "host");
    assert_eq!(first["expected_w"], 60.0);
    assert_eq!(first["inferred_state"]["mode"], "operational");

    let (status, body) = get_json(&app, "/api/pdus/pdu9/sockets").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
    assert!(body["message"].as_str().unwrap().contains("pdu9"));
}

#[tokio::test]
async fn device_history_window() {
    let (app, _) = replayed("ii_port_down");
    let start = SimConfig::default().start_ms;
    let uri = format!(
        "/api/devices/sw1/history?from={}&to={}",
        start + 10_000,
        start + 19_000
    );
    let (status, body) = get_json(&app, &uri).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["pdu"], "pdu1");
    assert_eq!(body["socket"], 1);
    let samples = body["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 10);
    assert_eq!(samples[0]["ts_ms"], start + 10_000);
    let w = samples[0]["power_w"].as_f64().unwrap();
    // 45 W base within its 10% offset, plus four 100M ports and one 1G port.
    let ports = 4.0 * 0.35 + 0.65;
    assert!((40.5 + ports..=49.5 + ports).contains(&w), "{w}");

    let (status, _) = get_json(&app, "/api/devices/nope/history").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_ranges_are_structured_errors() {
    let (app, _) = replayed("ii_port_down");
    for uri in [
        "/api/events?from=abc",
        "/api/events?from=10&to=5",
        "/api/report.csv?to=-1",
    ] {
        let (status, body) = get_json(&app, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(body["code"], "bad_range", "{uri}");
    }
    let (status, body) = get_json(&app, "/api/nothing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

/// The CSV row prefix `ts,pdu,socket,device,` a stored record exports as.
fn row_prefix(rec: &Value) -> String {
    let data = &rec["payload"]["data"];
    let (ts, pdu, socket, device) = match rec["kind"].as_str().unwrap() {
        "isolation" => {
            let e = &data["event"];
            (
                &e["detected_at_ms"],
                &e["pdu_id"],
                &e["socket_id"],
                e["device_id"].as_str().unwrap(),
            )
        }
        "correction" => (
            &data["ts_ms"],
            &data["pdu_id"],
            &data["socket_id"],
            data["device_id"].as_str().unwrap(),
        ),
        "detection" if data.get("event").is_some() => {
            let e = &data["event"];
            (
                &e["detected_at_ms"],
                &e["pdu_id"],
                &e["socket_id"],
                e["device_id"].as_str().unwrap(),
            )
        }
        "detection" => {
            let u = &data["unknown_device"];
            (&u["ts_ms"], &u["pdu_id"], &u["socket_id"], "")
        }
        other => panic!("unexpected kind {other}"),
    };
    format!("{ts},{},{socket},{device},", pdu.as_str().unwrap())
}

#[tokio::test]
async fn events_agree_with_the_report() {
    for scenario in ["v_stp", "multi_fault"] {
        let (app, _) = replayed(scenario);
        let (status, events) = get_json(&app, "/api/events").await;
        assert_eq!(status, StatusCode::OK);
        let (_, csv) = call(&app, "GET", "/api/report.csv", None).await;
        let csv = String::from_utf8(csv).unwrap();
        let events = events.as_array().unwrap();
        assert_eq!(events.len(), csv.lines().count() - 1, "{scenario}");
        for rec in events {
            let prefix = row_prefix(rec);
            assert!(
                csv.lines().any(|l| l.starts_with(&prefix)),
                "{scenario}: {prefix}"
            );
        }
    }

    let (app, shared) = replayed("v_stp");
    let (_, events) = get_json(&app, "/api/events").await;
    let isolations = events
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "isolation")
        .count();
    assert_eq!(isolations, 3);
    let (status, csv) = call(&app, "GET", "/api/report.csv", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(csv, shared.store.export_report(0, u64::MAX));

    // Windowed export matches the store byte for byte, and an empty window
    // is header only.
    let start = SimConfig::default().start_ms;
    let uri = format!(
        "/api/report.csv?from={}&to={}",
        start + 305_000,
        start + 400_000
    );
    let (_, windowed) = call(&app, "GET", &uri, None).await;
    assert_eq!(
        windowed,
        shared.store.export_report(start + 305_000, start + 400_000)
    );
    let (_, empty) = call(&app, "GET", "/api/report.csv?from=0&to=1", None).await;
    assert_eq!(empty, shared.store.export_report(0, 1));
    assert_eq!(String::from_utf8(empty).unwrap().lines().count(), 1);
}

#[tokio::test]
async fn fault_injection_needs_the_simulator() {
    let (app, _) = replayed("ii_port_down");
    let (status, body) = call(
        &app,
        "POST",
        "/api/sim/fault",
        Some(r#"{"action":"port_down sw1 3"}"#),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(body["code"], "not_simulated");
}

#[tokio::test]
async fn health_echoes_config() {
    let (app, _) = replayed("ii_port_down");
    let (status, body) = get_json(&app, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["simulated"], false);
    assert_eq!(body["config"]["theta_w"], 0.1);
    assert_eq!(body["config"]["sample_period_ms"], 1000);
}

async fn next_frame(body: &mut Body) -> Option<String> {
    let frame = tokio::time::timeout(Duration::from_secs(10), body.frame())
        .await
        .expect("live stream stalled")?
        .unwrap();
    Some(String::from_utf8(frame.into_data().unwrap().to_vec()).unwrap())
}

#[tokio::test]
async fn slow_live_consumer_is_dropped() {
    let (app, shared) = replayed("ii_port_down");
    let req = Request::get("/api/live").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();
    // Publishing never waits on the subscriber.
    for i in 0..(LIVE_BUFFER as u64 + 10) {
        shared
            .live
            .send(LiveMessage::Gap {
                pdu: "pdu1".into(),
                ts_ms: i,
            })
            .unwrap();
    }
    let frame = next_frame(&mut body).await.unwrap();
    assert!(frame.starts_with("event: dropped"), "{frame}");
    assert!(next_frame(&mut body).await.is_none());
}

fn live_config() -> AppConfig {
    AppConfig {
        topology_path: scenarios().join("topology.toml"),
        // 1 s of simulated time every 5 ms.
        time_scale: 200.0,
        ..AppConfig::default()
    }
}

async fn wait_for<F: Fn(&Shared) -> bool>(shared: &Shared, what: &str, f: F) {
    for _ in 0..2000 {
        if f(shared) {
            return;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("timed out waiting for {what}");
}

fn latest_ts(shared: &Shared) -> u64 {
    shared
        .status
        .read()
        .unwrap()
        .latest
        .values()
        .map(|s| s.ts_ms)
        .min()
        .unwrap_or(0)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn live_fault_reaches_the_event_stream() {
    let monitor = Monitor::start(live_config()).unwrap();
    let app = monitor.router();
    let shared = monitor.shared.clone();

    let req = Request::get("/api/live").body(Body::empty()).unwrap();
    let mut live = app.clone().oneshot(req).await.unwrap().into_body();
    let first = next_frame(&mut live).await.unwrap();
    assert!(first.starts_with("event: probe"), "{first}");

    // Past calibration, which takes 60 samples.
    let started = latest_ts(&shared);
    wait_for(&shared, "calibration", |s| latest_ts(s) >= started + 80_000).await;

    let (status, body) = call(
        &app,
        "POST",
        "/api/sim/fault",
        Some(r#"{"action":"port_down sw1 3"}"#),
    )
    .await;
    assert_eq!(
        status,
        StatusCode::ACCEPTED,
        "{}",
        String::from_utf8_lossy(&body)
    );
    let body: Value = serde_json::from_slice(&body).unwrap();
    let applies_at = body["applies_at_ms"].as_u64().unwrap();
    assert_eq!(body["action"], "port_down sw1 3");

    // Within 2 polls plus the detection window.
    let period = shared.config.sample_period_ms;
    let bound = applies_at + (2 + shared.config.window_samples as u64) * period;
    let mut seen = None;
    while seen.is_none() {
        let frame = next_frame(&mut live).await.expect("stream ended");
        for line in frame.lines().filter_map(|l| l.strip_prefix("data: ")) {
            let msg: Value = serde_json::from_str(line).unwrap();
            if msg["type"] == "output" && msg["output"]["type"] == "detection" {
                seen = Some(msg["output"].clone());
            }
            if msg["type"] == "probe" {
                assert!(
                    msg["ts_ms"].as_u64().unwrap() <= bound + 20 * period,
                    "no detection in time"
                );
            }
        }
    }
    let det = seen.unwrap();
    assert_eq!(det["device_id"], "sw1");
    assert!(det["detected_at_ms"].as_u64().unwrap() <= bound);
    let has_port_down = |candidates: &Value| {
        candidates
            .as_array()
            .unwrap()
            .iter()
            .any(|c| c["class"] == "PortDown")
    };
    assert!(has_port_down(&det["candidates"]));

    // Once verified, the isolation is queryable and exported.
    let uri = format!("/api/events?from={applies_at}");
    let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
    let isolation = loop {
        let (_, events) = get_json(&app, &uri).await;
        let found = events.as_array().unwrap().iter().find(|e| {
            e["kind"] == "isolation"
                && e["payload"]["data"]["event"]["device_id"] == "sw1"
                && has_port_down(&e["payload"]["data"]["event"]["candidates"])
        });
        if let Some(f) = found {
            break f.clone();
        }
        assert!(
            tokio::time::Instant::now() < deadline,
            "no isolation stored"
        );
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    let (_, csv) = call(
        &app,
        "GET",
        &format!("/api/report.csv?from={applies_at}"),
        None,
    )
    .await;
    let prefix = row_prefix(&isolation);
    assert!(String::from_utf8(csv)
        .unwrap()
        .lines()
        .any(|l| l.starts_with(&prefix)));

    monitor.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn live_fault_validation() {
    let monitor = Monitor::start(live_config()).unwrap();
    let app = monitor.router();
    let cases = [
        (
            r#"{"action":"port_down sw1 9"}"#,
            StatusCode::BAD_REQUEST,
            "invalid_action",
        ),
        (
            r#"{"action":"explode sw1"}"#,
            StatusCode::BAD_REQUEST,
            "invalid_action",
        ),
        (
            r#"{"act":"port_down sw1 3"}"#,
            StatusCode::BAD_REQUEST,
            "bad_body",
        ),
        (
            r#"{"action":"wake host1"}"#,
            StatusCode::UNPROCESSABLE_ENTITY,
            "rejected_action",
        ),
    ];
    for (body, status, code) in cases {
        let (got, resp) = call(&app, "POST", "/api/sim/fault", Some(body)).await;
        assert_eq!(got, status, "{body}");
        let resp: Value = serde_json::from_slice(&resp).unwrap();
        assert_eq!(resp["code"], code, "{body}");
    }
    let (_, health) = get_json(&app, "/api/health").await;
    assert_eq!(health["simulated"], true);
    monitor.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_leaves_a_readable_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    let monitor = Monitor::start(AppConfig {
        store_path: Some(path.clone()),
        ..live_config()
    })
    .unwrap();
    let shared = monitor.shared.clone();
    wait_for(&shared, "some samples", |s| s.store.len() > 100).await;
    monitor.stop().await;
    let reopened = Store::open(&path).unwrap();
    assert_eq!(reopened.len(), shared.store.len());
    assert_eq!(
        reopened.export_report(0, u64::MAX),
        shared.store.export_report(0, u64::MAX)
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn trace_backed_monitor_rejects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let topo = topology();
    let out = simulate(
        &topo,
        load_script("", &topo).unwrap(),
        SimConfig {
            duration_s: 30.0,
            ..SimConfig::default()
        },
        KnowledgeBase::default(),
        FdiConfig::default(),
        Arc::new(Store::in_memory()),
    )
    .unwrap();
    let trace = dir.path().join("quiet.ptrace");
    std::fs::write(&trace, &out.trace).unwrap();
    let monitor = Monitor::start(AppConfig {
        source: SourceKind::Trace,
        trace_path: Some(trace),
        ..live_config()
    })
    .unwrap();
    let app = monitor.router();
    let (status, _) = call(
        &app,
        "POST",
        "/api/sim/fault",
        Some(r#"{"action":"port_down sw1 3"}"#),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let shared = monitor.shared.clone();
    wait_for(&shared, "end of trace", |s| {
        s.status.read().unwrap().exhausted
    })
    .await;
    assert_eq!(latest_ts(&shared), SimConfig::default().start_ms + 29_000);
    monitor.stop().await;
}
