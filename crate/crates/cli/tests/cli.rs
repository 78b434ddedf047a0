use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use wattsentinel_core::fdi::{FdiConfig, KnowledgeBase};
use wattsentinel_core::runner::simulate;
use wattsentinel_core::simulator::{load_script, SimConfig, Topology};
use wattsentinel_core::store::{Store, REPORT_HEADER};

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn wattsentinel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wattsentinel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("WATTSENTINEL_THETA_W")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_to(out: &Path, scenario: &str, extra: &[&str]) -> Output {
    let topo = scenarios().join("topology.toml");
    let scen = scenarios().join(format!("{scenario}.txt"));
    let mut args = vec![
        "simulate",
        "--topology",
        path(&topo),
        "--scenario",
        path(&scen),
        "--out",
        path(out),
    ];
    args.extend_from_slice(extra);
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    wattsentinel(&args)
}

#[test]
fn simulate_writes_trace_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate_to(dir.path(), "ii_port_down", &["--seed", "3"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("probes: 1200"), "{stdout}");
    assert!(
        stdout.contains("PortDown (benign_state_change): 1"),
        "{stdout}"
    );
    let trace = std::fs::read(dir.path().join("ii_port_down.ptrace")).unwrap();
    assert_eq!(trace.iter().filter(|b| **b == b'\n').count(), 1200);
    let csv = std::fs::read_to_string(dir.path().join("ii_port_down.csv")).unwrap();
    assert!(csv.starts_with(REPORT_HEADER));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn replay_reproduces_the_simulated_report() {
    let dir = tempfile::tempdir().unwrap();
    for scenario in ["i_sleep_wake", "v_stp"] {
        let out = simulate_to(dir.path(), scenario, &[]);
        assert!(out.status.success());
        let trace = dir.path().join(format!("{scenario}.ptrace"));
        let topo = scenarios().join("topology.toml");
        let replayed =
            wattsentinel(&["replay", "--trace", path(&trace), "--topology", path(&topo)]);
        assert!(replayed.status.success());
        let original = std::fs::read(dir.path().join(format!("{scenario}.csv"))).unwrap();
        assert_eq!(replayed.stdout, original, "{scenario}");
    }
}

#[test]
fn zero_duration_is_empty_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate_to(dir.path(), "ii_port_down", &["--duration", "0"]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "probes: 0\nevents: none\n"
    );
    assert!(std::fs::read(dir.path().join("ii_port_down.ptrace"))
        .unwrap()
        .is_empty());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("ii_port_down.csv")).unwrap(),
        format!("{REPORT_HEADER}\n")
    );
}

#[test]
fn bad_scenario_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("bad.txt");
    std::fs::write(
        &scen,
        "# two good lines\n10 sleep host2\n20 port_down sw1 42\n",
    )
    .unwrap();
    let topo = scenarios().join("topology.toml");
    let out = wattsentinel(&[
        "simulate",
        "--topology",
        path(&topo),
        "--scenario",
        path(&scen),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("line 3"), "{stderr}");
    assert!(!dir.path().join("bad.ptrace").exists());
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ws.toml");
    std::fs::write(&cfg, "theta_w = -0.1\n").unwrap();
    let out = wattsentinel(&["--config", path(&cfg), "report", "--store", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta_w"));

    let missing = wattsentinel(&[
        "replay",
        "--trace",
        "/nonexistent.ptrace",
        "--topology",
        "/nonexistent.toml",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn env_overrides_reach_detection() {
    let dir = tempfile::tempdir().unwrap();
    let topo = scenarios().join("topology.toml");
    let scen = scenarios().join("ii_port_down.txt");
    // A threshold above every port signature hides the step.
    let out = Command::new(env!("CARGO_BIN_EXE_wattsentinel"))
        .args([
            "simulate",
            "--topology",
            path(&topo),
            "--scenario",
            path(&scen),
            "--out",
            path(dir.path()),
        ])
        .env("WATTSENTINEL_THETA_W", "0.5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("events: none"));
}

fn persisted_store(dir: &Path, scenario: &str) -> PathBuf {
    persisted_store_with(dir, scenario, SimConfig::default())
}

fn persisted_store_with(dir: &Path, scenario: &str, sim: SimConfig) -> PathBuf {
    let topo = Topology::load(&scenarios().join("topology.toml")).unwrap();
    let text = std::fs::read_to_string(scenarios().join(format!("{scenario}.txt"))).unwrap();
    let path = dir.join("history.jsonl");
    let store = Arc::new(Store::open(&path).unwrap());
    simulate(
        &topo,
        load_script(&text, &topo).unwrap(),
        sim,
        KnowledgeBase::default(),
        FdiConfig::default(),
        store.clone(),
    )
    .unwrap();
    store.flush().unwrap();
    path
}

#[test]
fn report_exports_a_persisted_store() {
    let dir = tempfile::tempdir().unwrap();
    let store_path = persisted_store(dir.path(), "multi_fault");
    let store = Store::open(&store_path).unwrap();
    let out = wattsentinel(&["report", "--store", path(&store_path)]);
    assert!(out.status.success());
    assert_eq!(out.stdout, store.export_report(0, u64::MAX));

    let start = SimConfig::default().start_ms;
    let (from, to) = ((start + 400_000).to_string(), (start + 500_000).to_string());
    let out = wattsentinel(&[
        "report",
        "--store",
        path(&store_path),
        "--from",
        &from,
        "--to",
        &to,
    ]);
    assert!(out.status.success());
    assert_eq!(out.stdout, format!("{REPORT_HEADER}\n").into_bytes());

    let none = wattsentinel(&["report", "--store", path(&dir.path().join("missing.jsonl"))]);
    assert_eq!(none.status.code(), Some(1));
}

#[test]
fn working_hours_report_from_a_store() {
    let dir = tempfile::tempdir().unwrap();
    let store_path = persisted_store(dir.path(), "ii_port_down");
    let topo = scenarios().join("topology.toml");
    // Ten minutes of data cannot cover a day.
    let out = wattsentinel(&[
        "report",
        "--working-hours",
        "--store",
        path(&store_path),
        "--topology",
        path(&topo),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("24"));
}

#[test]
fn working_hours_flag_the_device_left_on() {
    let dir = tempfile::tempdir().unwrap();
    // One reading a minute over a day starting at 08:00 UTC.
    let sim = SimConfig {
        tick_s: 60.0,
        duration_s: 86_400.0,
        start_ms: 1_704_096_000_000,
        ..SimConfig::default()
    };
    let store_path = persisted_store_with(dir.path(), "working_day", sim);
    let topo = scenarios().join("topology.toml");
    let out = wattsentinel(&[
        "report",
        "--working-hours",
        "--store",
        path(&store_path),
        "--topology",
        path(&topo),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let hours: Vec<u64> = report["working_hours"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h.as_u64().unwrap())
        .collect();
    assert_eq!(hours, (8..18).collect::<Vec<u64>>());
    let flagged: Vec<&str> = report["flagged"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["device_id"].as_str().unwrap())
        .collect();
    assert_eq!(flagged, ["ap1"]);
    assert_eq!(report["flagged"][0]["suggestion"], "transition to sleep");
}

#[test]
fn monitor_exits_when_the_port_is_taken() {
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let topo = scenarios().join("topology.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_wattsentinel"))
        .args(["monitor", "--listen", &addr])
        .env("WATTSENTINEL_TOPOLOGY_PATH", path(&topo))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot bind"));
}

#[test]
fn truncated_trace_reports_what_precedes_the_cut() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate_to(dir.path(), "ii_port_down", &[])
        .status
        .success());
    let trace = dir.path().join("ii_port_down.ptrace");
    let full = std::fs::read(&trace).unwrap();
    // Cut the last line in half.
    let cut = full.len() - 40;
    let short = dir.path().join("short.ptrace");
    std::fs::write(&short, &full[..cut]).unwrap();
    let topo = scenarios().join("topology.toml");
    let out = wattsentinel(&["replay", "--trace", path(&short), "--topology", path(&topo)]);
    assert!(out.status.success());
    assert!(!out.stderr.is_empty());
    let original = std::fs::read(dir.path().join("ii_port_down.csv")).unwrap();
    assert_eq!(out.stdout, original);
}
