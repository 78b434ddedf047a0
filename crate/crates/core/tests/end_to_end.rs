use std::path::PathBuf;
use std::sync::Arc;

use wattsentinel_core::fdi::{ChangeClass, FdiConfig, KnowledgeBase, PipelineOutput};
use wattsentinel_core::powermodel::{modeled_delta, ModelRegistry, Speed, StateChange};
use wattsentinel_core::runner::{replay, simulate, RunOutput};
use wattsentinel_core::simulator::{load_script, SimConfig, Topology};
use wattsentinel_core::store::{RecordKey, RecordKind, Store, REPORT_HEADER};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn topology_text() -> String {
    std::fs::read_to_string(dir().join("topology.toml")).unwrap()
}

fn scenario(name: &str) -> String {
    std::fs::read_to_string(dir().join(format!("{name}.txt"))).unwrap()
}

fn sim(topo: &Topology, script: &str, cfg: SimConfig) -> (RunOutput, Arc<Store>) {
    let store = Arc::new(Store::in_memory());
    let out = simulate(
        topo,
        load_script(script, topo).unwrap(),
        cfg,
        KnowledgeBase::default(),
        FdiConfig::default(),
        store.clone(),
    )
    .unwrap();
    (out, store)
}

fn isolated_classes(out: &RunOutput) -> Vec<(String, ChangeClass)> {
    out.outputs
        .iter()
        .filter_map(|o| match o {
            PipelineOutput::Isolation(r) => Some((r.event.device_id.clone(), r.event.chosen)),
            _ => None,
        })
        .collect()
}

#[test]
fn golden_scenarios_reproduce_their_classes() {
    let topo = Topology::from_toml(&topology_text()).unwrap();
    let cases: [(&str, &[(&str, ChangeClass)]); 5] = [
        (
            "i_sleep_wake",
            &[("host2", ChangeClass::Sleep), ("host2", ChangeClass::Wake)],
        ),
        ("ii_port_down", &[("sw1", ChangeClass::PortDown)]),
        ("iii_link_rate", &[("sw1", ChangeClass::LinkRateDown)]),
        (
            "iv_eee_lpi",
            &[("sw2", ChangeClass::PortDown), ("sw2", ChangeClass::PortUp)],
        ),
        (
            "v_stp",
            &[
                ("sw1", ChangeClass::PortDown),
                ("sw2", ChangeClass::PortDown),
                ("sw3", ChangeClass::StpReevaluation),
            ],
        ),
    ];
    let mut total = 0;
    for (name, expected) in cases {
        let (out, _) = sim(
            &topo,
            &scenario(name),
            SimConfig {
                seed: 11,
                ..SimConfig::default()
            },
        );
        let mut got = isolated_classes(&out);
        got.sort_by(|a, b| a.0.cmp(&b.0));
        let want: Vec<(String, ChangeClass)> =
            expected.iter().map(|(d, c)| (d.to_string(), *c)).collect();
        assert_eq!(got, want, "{name}");
        total += got.len();
    }
    assert!(total >= 5);
}

#[test]
fn noiseless_amplitudes_equal_modeled_deltas() {
    let topo = Topology::from_toml(&topology_text()).unwrap();
    let reg: ModelRegistry = topo.registry();
    let sw1 = reg.device("sw1").unwrap();
    let cfg = SimConfig {
        noise_sigma_w: 0.0,
        ..SimConfig::default()
    };
    let cases = [
        (
            "300 port_down sw1 3",
            StateChange::port(ChangeClass::PortDown, 3),
        ),
        (
            "300 set_speed sw1 4 100",
            StateChange::speed(ChangeClass::LinkRateDown, 4, Speed::M100),
        ),
        (
            "300 lpi_enter sw1 5",
            StateChange::port(ChangeClass::EeeLpiEnter, 5),
        ),
    ];
    for (line, change) in cases {
        let (out, _) = sim(&topo, line, cfg.clone());
        let e = out
            .outputs
            .iter()
            .find_map(|o| match o {
                PipelineOutput::Detection(e) => Some(e),
                _ => None,
            })
            .unwrap_or_else(|| panic!("{line}: no detection"));
        let modeled = modeled_delta(&sw1.model, &sw1.state, &change).unwrap();
        assert!(
            (e.feature.amplitude_w - modeled.watts()).abs() <= 0.001,
            "{line}: {} vs {modeled}",
            e.feature.amplitude_w
        );
    }
}

#[test]
fn truncated_trace_replays_its_prefix() {
    let topo = Topology::from_toml(&topology_text()).unwrap();
    let (out, _) = sim(&topo, &scenario("ii_port_down"), SimConfig::default());
    let lines: Vec<&[u8]> = out.trace.split(|b| *b == b'\n').collect();
    // Keep 400 ticks of two PDUs, then half of the next line.
    let mut cut: Vec<u8> = lines[..800].join(&b'\n');
    cut.push(b'\n');
    cut.extend_from_slice(&lines[800][..lines[800].len() / 2]);
    let r = replay(
        &cut,
        &topo,
        KnowledgeBase::default(),
        FdiConfig::default(),
        Arc::new(Store::in_memory()),
    )
    .unwrap();
    assert_eq!(r.probes, 800);
    assert!(r.trace_error.is_some());
    assert_eq!(isolated_classes(&r), isolated_classes(&out));
}

#[test]
fn unbound_socket_reports_unknown_device() {
    let text = topology_text().replace(
        "id = \"host3\"\nclass = \"host\"",
        "id = \"host3\"\nclass = \"host\"\nregistered = false",
    );
    let topo = Topology::from_toml(&text).unwrap();
    assert!(topo.registry().device("host3").is_none());
    // Without the per-device offset the host sits at its nominal baseline.
    let cfg = SimConfig {
        baseline_offset_fraction: 0.0,
        ..SimConfig::default()
    };
    let (out, _) = sim(&topo, "", cfg);
    let full = Topology::from_toml(&topology_text()).unwrap();
    let r = replay(
        &out.trace,
        &topo,
        KnowledgeBase::default(),
        FdiConfig::default(),
        Arc::new(Store::in_memory()),
    )
    .unwrap();
    let unknown: Vec<_> = r
        .outputs
        .iter()
        .filter_map(|o| match o {
            PipelineOutput::UnknownDevice(u) => Some(u),
            _ => None,
        })
        .collect();
    assert!(!unknown.is_empty());
    assert!(unknown
        .iter()
        .all(|u| u.pdu_id == "pdu2" && u.socket_id == 2));
    assert!(unknown
        .iter()
        .any(|u| u.suggested_class == Some(wattsentinel_core::DeviceClass::Host)));
    // The same trace against the full topology is clean.
    let clean = replay(
        &out.trace,
        &full,
        KnowledgeBase::default(),
        FdiConfig::default(),
        Arc::new(Store::in_memory()),
    )
    .unwrap();
    assert!(!clean
        .outputs
        .iter()
        .any(|o| matches!(o, PipelineOutput::UnknownDevice(_))));
}

#[test]
fn zero_duration_is_empty() {
    let topo = Topology::from_toml(&topology_text()).unwrap();
    let (out, store) = sim(
        &topo,
        &scenario("ii_port_down"),
        SimConfig {
            duration_s: 0.0,
            ..SimConfig::default()
        },
    );
    assert!(out.trace.is_empty());
    assert_eq!(out.probes, 0);
    assert_eq!(out.report_csv, format!("{REPORT_HEADER}\n").into_bytes());
    assert!(store.is_empty());
}

#[test]
fn event_window_holds_detection_and_isolation() {
    let topo = Topology::from_toml(&topology_text()).unwrap();
    let (out, store) = sim(&topo, &scenario("ii_port_down"), SimConfig::default());
    let start = SimConfig::default().start_ms;
    let key = RecordKey::Device("sw1".into());
    let det = store.query_window(
        &key,
        RecordKind::Detection,
        start + 300_000,
        start + 330_000,
    );
    let iso = store.query_window(
        &key,
        RecordKind::Isolation,
        start + 300_000,
        start + 330_000,
    );
    assert_eq!(det.len(), 1);
    assert_eq!(iso.len(), 1);
    assert!(store
        .query_window(&key, RecordKind::Detection, start, start + 299_000)
        .is_empty());
    assert_eq!(out.summary.get("PortDown (benign_state_change)"), Some(&1));
}

#[test]
fn report_is_stable_across_runs() {
    let topo = Topology::from_toml(&topology_text()).unwrap();
    let a = sim(&topo, &scenario("multi_fault"), SimConfig::default()).0;
    let b = sim(&topo, &scenario("multi_fault"), SimConfig::default()).0;
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.report_csv, b.report_csv);
    assert!(a.report_csv.starts_with(REPORT_HEADER.as_bytes()));
}
