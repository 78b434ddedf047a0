//! Fixtures shared by the benchmarks in `benches/`.

use wattsentinel_core::fdi::SeriesPoint;
use wattsentinel_core::simulator::{load_script, SimConfig, Topology};
use wattsentinel_core::telemetry::{encode_probe, synthesize_reading, SocketSample};
use wattsentinel_core::units::Power;

pub const TOPOLOGY: &str = include_str!("../../../scenarios/topology.toml");

pub fn topology() -> Topology {
    Topology::from_toml(TOPOLOGY).expect("bundled topology")
}

/// A flat series with a 0.35 W drop `at` samples in, one point per second.
pub fn step_series(len: usize, at: usize) -> Vec<SeriesPoint> {
    (0..len)
        .map(|i| SeriesPoint {
            ts_ms: i as u64 * 1000,
            power: Power::from_watts(if i < at { 47.05 } else { 46.70 }),
        })
        .collect()
}

/// Readings spanning a few hundred watts.
pub fn samples(n: usize) -> Vec<SocketSample> {
    (0..n)
        .map(|i| {
            synthesize_reading(
                1,
                Power::from_milliwatts(1_000 + (i as i64 * 7_919) % 400_000),
            )
        })
        .collect()
}

/// The wire-format trace of `scenario` on the bundled topology.
pub fn trace(scenario: &str, sim: SimConfig) -> Vec<u8> {
    let topo = topology();
    let script = load_script(scenario, &topo).expect("valid scenario");
    let mut net = wattsentinel_core::simulator::SimNetwork::new(topo, script, sim.clone())
        .expect("valid simulation");
    let mut out = Vec::new();
    for t in 0..sim.ticks() {
        for p in net.step(sim.start_ms + t * sim.tick_ms()).expect("step") {
            out.extend(encode_probe(&p, Power::ZERO).expect("encodable"));
            out.push(b'\n');
        }
    }
    out
}
