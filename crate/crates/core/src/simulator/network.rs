//! Discrete-time network: device state machines, spanning-tree transients,
//! noise, and probe synthesis per PDU.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::script::{Action, FaultScript, ScriptEntry};
use super::stp::StpOutcome;
use super::topology::{assign_roles, converge_states, Endpoint, Topology};
use crate::powermodel::{
    expected_power, DeviceMode, DevicePowerModel, DeviceStateSnapshot, PortState,
};
use crate::telemetry::{synthesize_reading, ProbeResponse};
use crate::units::Power;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("simulation config: {0}")]
    Config(String),
    #[error("time must advance: {next} ms after {prev} ms")]
    ClockRegression { prev: u64, next: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub tick_s: f64,
    pub noise_sigma_w: f64,
    pub seed: u64,
    pub duration_s: f64,
    /// Wall-clock timestamp of the first tick.
    pub start_ms: u64,
    /// Each device's base power is scaled once by `1 + u`, `u` uniform in
    /// `[-f, f]`.
    pub baseline_offset_fraction: f64,
    /// Spanning-tree transient length, uniform in `[lo, hi)` seconds.
    pub stp_spike_s: (f64, f64),
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick_s: 1.0,
            noise_sigma_w: 0.02,
            seed: 0,
            duration_s: 600.0,
            start_ms: 1_704_067_200_000,
            baseline_offset_fraction: 0.1,
            stp_spike_s: (2.0, 4.0),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            return bad("tick_s must be > 0");
        }
        if self.tick_ms() < crate::telemetry::PollConfig::MIN_PERIOD_MS {
            return bad("tick_s must be at least 0.1");
        }
        if !(self.noise_sigma_w.is_finite() && self.noise_sigma_w >= 0.0) {
            return bad("noise_sigma_w must be >= 0");
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return bad("duration_s must be >= 0");
        }
        if !(0.0..1.0).contains(&self.baseline_offset_fraction) {
            return bad("baseline_offset_fraction must be in [0, 1)");
        }
        let (lo, hi) = self.stp_spike_s;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
            return bad("stp_spike_s must satisfy 0 < lo < hi");
        }
        Ok(())
    }

    pub fn tick_ms(&self) -> u64 {
        (self.tick_s * 1000.0).round() as u64
    }

    /// Number of ticks in the run.
    pub fn ticks(&self) -> u64 {
        ((self.duration_s * 1000.0).round() as u64) / self.tick_ms()
    }

    pub fn end_ms(&self) -> u64 {
        self.start_ms + self.ticks() * self.tick_ms()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDevice {
    pub id: String,
    pub pdu: String,
    pub socket: u16,
    pub priority: u32,
    /// Ground-truth model, including the drawn baseline offset.
    pub model: DevicePowerModel,
    pub state: DeviceStateSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransientKind {
    StpSpike,
    WakeBurst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transient {
    pub device: String,
    pub kind: TransientKind,
    pub from_ms: u64,
    pub until_ms: u64,
    pub power: Power,
}

/// What happened to a scripted or injected action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLogEntry {
    pub ts_ms: u64,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SimNetwork {
    topology: Topology,
    cfg: SimConfig,
    devices: BTreeMap<String, SimDevice>,
    failed_links: BTreeSet<usize>,
    stp: StpOutcome,
    transients: Vec<Transient>,
    script: VecDeque<ScriptEntry>,
    injected: VecDeque<Action>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    last_ts: Option<u64>,
    log: Vec<SimLogEntry>,
}

impl SimNetwork {
    pub fn new(topology: Topology, script: FaultScript, cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f = cfg.baseline_offset_fraction;
        let states = topology.initial_states();
        let mut devices = BTreeMap::new();
        for spec in topology.devices() {
            let mut model = topology.model(&spec.id).expect("device exists");
            if f > 0.0 {
                let u: f64 = rng.random_range(-f..=f);
                let mut shifted = model.clone();
                shifted.base = model.base.scale(1.0 + u);
                if shifted.validate().is_ok() {
                    model = shifted;
                }
            }
            devices.insert(
                spec.id.clone(),
                SimDevice {
                    id: spec.id.clone(),
                    pdu: spec.pdu.clone(),
                    socket: spec.socket,
                    priority: spec.priority,
                    model,
                    state: states[&spec.id].clone(),
                },
            );
        }
        let noise = (cfg.noise_sigma_w > 0.0)
            .then(|| Normal::new(0.0, cfg.noise_sigma_w).expect("sigma validated"));
        let mut net = SimNetwork {
            topology,
            cfg,
            devices,
            failed_links: BTreeSet::new(),
            stp: StpOutcome::default(),
            transients: Vec::new(),
            script: script.entries.into(),
            injected: VecDeque::new(),
            rng,
            noise,
            last_ts: None,
            log: Vec::new(),
        };
        net.stp = net.converge();
        Ok(net)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn device(&self, id: &str) -> Option<&SimDevice> {
        self.devices.get(id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &SimDevice> {
        self.devices.values()
    }

    pub fn stp(&self) -> &StpOutcome {
        &self.stp
    }

    pub fn transients(&self) -> &[Transient] {
        &self.transients
    }

    pub fn log(&self) -> &[SimLogEntry] {
        &self.log
    }

    /// Queues an action for the next tick. Rejected if it does not fit the
    /// device's current mode.
    pub fn inject(&mut self, action: Action) -> Result<(), String> {
        action.check_targets(&self.topology)?;
        if let Some(d) = self.devices.get(action.device()) {
            action.next_mode(d.state.mode)?;
        }
        self.injected.push_back(action);
        Ok(())
    }

    /// Noise-free power of a device at `ts_ms`, transients included.
    pub fn device_power(&self, id: &str, ts_ms: u64) -> Option<Power> {
        let d = self.devices.get(id)?;
        let steady = expected_power(&d.model, &d.state).ok()?;
        let extra: Power = self
            .transients
            .iter()
            .filter(|t| t.device == id && t.from_ms <= ts_ms && ts_ms < t.until_ms)
            .map(|t| t.power)
            .sum();
        Some(steady + extra)
    }

    /// Advances to `ts_ms`: applies due actions, then emits one probe per PDU.
    pub fn step(&mut self, ts_ms: u64) -> Result<Vec<ProbeResponse>, SimError> {
        if let Some(prev) = self.last_ts {
            if ts_ms <= prev {
                return Err(SimError::ClockRegression { prev, next: ts_ms });
            }
        }
        self.last_ts = Some(ts_ms);
        let mut due = Vec::new();
        while self
            .script
            .front()
            .is_some_and(|e| self.cfg.start_ms + e.at_ms <= ts_ms)
        {
            let e = self.script.pop_front().expect("front exists");
            due.push((e.action, Some(e.line)));
        }
        due.extend(self.injected.drain(..).map(|a| (a, None)));
        if !due.is_empty() {
            for (action, line) in due {
                let result = self.apply(&action, ts_ms);
                self.log.push(SimLogEntry {
                    ts_ms,
                    action: action.to_string(),
                    line,
                    error: result.err(),
                });
            }
            self.refresh_ports();
            let next = self.converge();
            let (lo, hi) = self.cfg.stp_spike_s;
            for bridge in next.participants(&self.stp) {
                let d = &self.devices[&bridge];
                let secs: f64 = self.rng.random_range(lo..hi);
                self.transients.push(Transient {
                    device: bridge.clone(),
                    kind: TransientKind::StpSpike,
                    from_ms: ts_ms,
                    until_ms: ts_ms + (secs * 1000.0).round() as u64,
                    power: d.model.stp_spike,
                });
            }
            self.stp = next;
        }
        self.transients.retain(|t| ts_ms < t.until_ms);

        let mut by_pdu: BTreeMap<&str, Vec<(u16, &str)>> = BTreeMap::new();
        for d in self.devices.values() {
            by_pdu.entry(&d.pdu).or_default().push((d.socket, &d.id));
        }
        let mut probes = Vec::with_capacity(by_pdu.len());
        for (pdu, mut sockets) in by_pdu {
            sockets.sort();
            let mut samples = Vec::with_capacity(sockets.len());
            let mut total = Power::ZERO;
            for (socket, id) in sockets {
                let mut w = self.device_power(id, ts_ms).expect("device exists").watts();
                if let Some(n) = &self.noise {
                    w += n.sample(&mut self.rng);
                }
                let p = Power::from_watts(w.max(0.0));
                total += p;
                samples.push(synthesize_reading(socket, p));
            }
            probes.push(ProbeResponse {
                pdu_id: pdu.to_string(),
                timestamp_ms: ts_ms,
                sockets: samples,
                total: synthesize_reading(0, total),
            });
        }
        Ok(probes)
    }

    fn apply(&mut self, action: &Action, ts_ms: u64) -> Result<(), String> {
        let id = action.device().to_string();
        let dev = self
            .devices
            .get_mut(&id)
            .ok_or_else(|| format!("unknown device `{id}`"))?;
        let mode = dev.state.mode;
        if mode == DeviceMode::Off && !matches!(action, Action::PowerOn { .. }) {
            return Err(format!("`{id}` is powered off"));
        }
        let burst = |dev: &SimDevice| Transient {
            device: dev.id.clone(),
            kind: TransientKind::WakeBurst,
            from_ms: ts_ms,
            until_ms: ts_ms + (dev.model.wake_burst_s * 1000.0).round() as u64,
            power: dev.model.wake_burst,
        };
        match action {
            Action::Sleep { .. } => {
                if mode != DeviceMode::Operational {
                    return Err(format!("`{id}` is not operational"));
                }
                dev.state.mode = DeviceMode::Sleep;
            }
            Action::Wake { .. } => {
                if mode != DeviceMode::Sleep {
                    return Err(format!("`{id}` is not asleep"));
                }
                dev.state.mode = DeviceMode::Operational;
                let t = burst(dev);
                self.transients.push(t);
            }
            Action::PowerOff { .. } => dev.state.mode = DeviceMode::Off,
            Action::PowerOn { .. } => {
                if mode != DeviceMode::Off {
                    return Err(format!("`{id}` is not off"));
                }
                dev.state.mode = DeviceMode::Operational;
                let t = burst(dev);
                self.transients.push(t);
            }
            Action::PortDown { port, .. } => port_of(dev, *port)?.admin_up = false,
            Action::PortUp { port, .. } => port_of(dev, *port)?.admin_up = true,
            Action::SetSpeed { port, mbps, .. } => {
                port_of(dev, *port)?.speed = *mbps;
                // Autonegotiation settles both ends on the same rate.
                let end = Endpoint {
                    device: id.clone(),
                    port: Some(*port),
                };
                if let Some(peer) = self.topology.peer(&end).and_then(Endpoint::port_ref) {
                    if let Some(p) = self
                        .devices
                        .get_mut(&peer.device)
                        .and_then(|d| d.state.ports.iter_mut().find(|x| x.port_id == peer.port))
                    {
                        p.speed = *mbps;
                    }
                }
            }
            Action::LpiEnter { port, .. } => {
                let p = port_of(dev, *port)?;
                if !p.oper_up || p.lpi_active {
                    return Err(format!("`{id}` port {port} is not up and active"));
                }
                p.lpi_active = true;
            }
            Action::LpiExit { port, .. } => {
                let p = port_of(dev, *port)?;
                if !p.lpi_active {
                    return Err(format!("`{id}` port {port} is not in LPI"));
                }
                p.lpi_active = false;
            }
            Action::LinkFail { port, .. } => {
                let end = Endpoint {
                    device: id.clone(),
                    port: Some(*port),
                };
                let idx = self
                    .topology
                    .links()
                    .iter()
                    .position(|l| l.a == end || l.b == end)
                    .ok_or_else(|| format!("`{end}` has no link"))?;
                self.failed_links.insert(idx);
            }
            Action::SetPriority { priority, .. } => dev.priority = *priority,
        }
        Ok(())
    }

    /// Recomputes each port's operational status from admin state, device
    /// power and link health.
    fn refresh_ports(&mut self) {
        let mut link_ok: BTreeMap<(String, u16), bool> = BTreeMap::new();
        for (i, l) in self.topology.links().iter().enumerate() {
            let end_ok = |e: &Endpoint| {
                let d = &self.devices[&e.device];
                d.state.mode != DeviceMode::Off
                    && e.port
                        .is_none_or(|p| d.state.port(p).is_some_and(|x| x.admin_up))
            };
            // Hosts and access points keep their NIC link while powered off.
            let far_ok = |e: &Endpoint| e.port.is_none() || end_ok(e);
            let ok = !self.failed_links.contains(&i) && far_ok(&l.a) && far_ok(&l.b);
            for e in [&l.a, &l.b] {
                if let Some(p) = e.port {
                    link_ok.insert((e.device.clone(), p), ok);
                }
            }
        }
        for d in self.devices.values_mut() {
            let running = d.state.mode != DeviceMode::Off;
            for p in &mut d.state.ports {
                let linked = link_ok
                    .get(&(d.id.clone(), p.port_id))
                    .copied()
                    .unwrap_or(true);
                p.oper_up = p.admin_up && running && linked;
                if !p.oper_up {
                    p.lpi_active = false;
                }
            }
        }
    }

    fn converge(&mut self) -> StpOutcome {
        let mut states: BTreeMap<String, DeviceStateSnapshot> = self
            .devices
            .iter()
            .map(|(k, d)| (k.clone(), d.state.clone()))
            .collect();
        let priorities = self
            .devices
            .iter()
            .map(|(k, d)| (k.clone(), d.priority))
            .collect();
        let failed: Vec<_> = self
            .topology
            .links()
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.failed_links.contains(i))
            .map(|(_, l)| l.clone())
            .collect();
        let out = converge_states(&states, &failed, &priorities);
        assign_roles(&mut states, &out);
        for (k, s) in states {
            self.devices.get_mut(&k).expect("same keys").state = s;
        }
        out
    }
}

fn port_of(dev: &mut SimDevice, p: u16) -> Result<&mut PortState, String> {
    let id = dev.id.clone();
    dev.state
        .ports
        .iter_mut()
        .find(|x| x.port_id == p)
        .ok_or_else(|| format!("`{id}` has no port {p}"))
}
