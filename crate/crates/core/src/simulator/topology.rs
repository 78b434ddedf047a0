//! Topology files: devices, their sockets and ports, and the links between
//! them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::stp::{stp_converge, Bridge, StpLink, StpOutcome};
use crate::fdi::PortRef;
use crate::powermodel::{
    DeviceClass, DeviceMode, DevicePowerModel, DeviceStateSnapshot, ModelRegistry, PortIncrements,
    PortState, Speed, StpRole,
};
use crate::units::Power;

pub const DEFAULT_BRIDGE_PRIORITY: u32 = 32_768;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology parse error: {0}")]
    Parse(String),
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("cannot read topology: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSpec {
    pub id: u16,
    #[serde(default = "default_speed")]
    pub speed: Speed,
    #[serde(default = "yes")]
    pub up: bool,
    #[serde(default)]
    pub lpi: bool,
}

fn default_speed() -> Speed {
    Speed::M1000
}

fn yes() -> bool {
    true
}

fn default_priority() -> u32 {
    DEFAULT_BRIDGE_PRIORITY
}

/// Per-device replacements for the class defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub base_w: Option<Power>,
    pub sleep_w: Option<Power>,
    pub off_w: Option<Power>,
    pub port_active_w: Option<PortIncrements>,
    pub lpi_saving_w: Option<Power>,
    pub stp_spike_w: Option<Power>,
    pub wake_burst_w: Option<Power>,
    pub wake_burst_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub class: DeviceClass,
    pub pdu: String,
    pub socket: u16,
    #[serde(default = "default_priority")]
    pub priority: u32,
    #[serde(default = "default_mode")]
    pub mode: DeviceMode,
    /// Unregistered devices draw power but are unknown to the monitor.
    #[serde(default = "yes")]
    pub registered: bool,
    #[serde(default, rename = "port")]
    pub ports: Vec<PortSpec>,
    #[serde(default)]
    pub model: ModelOverrides,
}

fn default_mode() -> DeviceMode {
    DeviceMode::Operational
}

/// One end of a link. Hosts and access points attach without a port.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Endpoint {
    pub device: String,
    pub port: Option<u16>,
}

impl TryFrom<String> for Endpoint {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        if s.contains(':') {
            let p: PortRef = s.parse()?;
            Ok(Endpoint {
                device: p.device,
                port: Some(p.port),
            })
        } else if s.is_empty() {
            Err("empty link endpoint".into())
        } else {
            Ok(Endpoint {
                device: s,
                port: None,
            })
        }
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.to_string()
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.port {
            Some(p) => write!(f, "{}:{p}", self.device),
            None => f.write_str(&self.device),
        }
    }
}

impl Endpoint {
    pub fn port_ref(&self) -> Option<PortRef> {
        self.port.map(|port| PortRef {
            device: self.device.clone(),
            port,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: Endpoint,
    pub b: Endpoint,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    #[serde(default, rename = "device")]
    devices: Vec<DeviceSpec>,
    #[serde(default, rename = "link")]
    links: Vec<LinkSpec>,
}

/// A validated topology. Devices are ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    devices: BTreeMap<String, DeviceSpec>,
    links: Vec<LinkSpec>,
}

impl Topology {
    pub fn from_toml(text: &str) -> Result<Self, TopologyError> {
        let file: TopologyFile =
            toml::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
        Self::new(file.devices, file.links)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn new(devices: Vec<DeviceSpec>, links: Vec<LinkSpec>) -> Result<Self, TopologyError> {
        let bad = |m: String| Err(TopologyError::Invalid(m));
        let mut by_id = BTreeMap::new();
        let mut sockets = BTreeSet::new();
        for d in devices {
            if d.id.is_empty() || d.id.contains([':', ' ', '\t']) {
                return bad(format!(
                    "device id `{}` must be non-empty without ':' or spaces",
                    d.id
                ));
            }
            if d.pdu.is_empty() || d.pdu.contains([' ', '\t']) {
                return bad(format!("device `{}` has an invalid pdu id", d.id));
            }
            if d.socket == 0 {
                return bad(format!("device `{}`: socket ids start at 1", d.id));
            }
            if !sockets.insert((d.pdu.clone(), d.socket)) {
                return bad(format!("socket {}/{} is used twice", d.pdu, d.socket));
            }
            if !d.class.has_ports() && !d.ports.is_empty() {
                return bad(format!(
                    "device `{}` is a {} and cannot have ports",
                    d.id, d.class
                ));
            }
            let mut ids = BTreeSet::new();
            for p in &d.ports {
                if p.id == 0 || !ids.insert(p.id) {
                    return bad(format!(
                        "device `{}` has a zero or duplicate port {}",
                        d.id, p.id
                    ));
                }
                if p.lpi && !p.up {
                    return bad(format!(
                        "device `{}` port {} is in LPI but down",
                        d.id, p.id
                    ));
                }
            }
            let topo_model = model_with(&d);
            topo_model
                .validate()
                .map_err(|e| TopologyError::Invalid(format!("device `{}`: {e}", d.id)))?;
            if by_id.insert(d.id.clone(), d).is_some() {
                return bad("duplicate device id".into());
            }
        }
        let mut used = BTreeSet::new();
        for l in &links {
            for e in [&l.a, &l.b] {
                let Some(d) = by_id.get(&e.device) else {
                    return bad(format!("link endpoint `{e}` names an unknown device"));
                };
                match e.port {
                    Some(p) if !d.ports.iter().any(|s| s.id == p) => {
                        return bad(format!("link endpoint `{e}`: no such port"));
                    }
                    None if d.class.has_ports() => {
                        return bad(format!("link endpoint `{e}` must name a port"));
                    }
                    _ => {}
                }
                if e.port.is_some() && !used.insert(e.clone()) {
                    return bad(format!("port `{e}` is linked twice"));
                }
            }
            if l.a.device == l.b.device {
                return bad(format!("link `{}`-`{}` loops back to one device", l.a, l.b));
            }
            if l.a.port.is_none() && l.b.port.is_none() {
                return bad(format!(
                    "link `{}`-`{}` has no port on either end",
                    l.a, l.b
                ));
            }
        }
        Ok(Topology {
            devices: by_id,
            links,
        })
    }

    pub fn device(&self, id: &str) -> Option<&DeviceSpec> {
        self.devices.get(id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceSpec> {
        self.devices.values()
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn pdu_ids(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.devices.values().map(|d| &d.pdu).collect();
        set.into_iter().cloned().collect()
    }

    /// The far end of the link attached to `end`, if any.
    pub fn peer(&self, end: &Endpoint) -> Option<&Endpoint> {
        self.links.iter().find_map(|l| {
            if &l.a == end {
                Some(&l.b)
            } else if &l.b == end {
                Some(&l.a)
            } else {
                None
            }
        })
    }

    /// Class defaults with the device's overrides applied.
    pub fn model(&self, id: &str) -> Option<DevicePowerModel> {
        self.devices.get(id).map(model_with)
    }

    /// Initial per-device state with spanning-tree roles assigned.
    pub fn initial_states(&self) -> BTreeMap<String, DeviceStateSnapshot> {
        let mut states: BTreeMap<String, DeviceStateSnapshot> = self
            .devices
            .values()
            .map(|d| {
                let running = d.mode != DeviceMode::Off;
                let ports = d
                    .ports
                    .iter()
                    .map(|p| PortState {
                        port_id: p.id,
                        admin_up: p.up,
                        oper_up: p.up && running,
                        speed: p.speed,
                        lpi_active: p.lpi && running,
                        stp_role: StpRole::None,
                    })
                    .collect();
                (
                    d.id.clone(),
                    DeviceStateSnapshot {
                        device_id: d.id.clone(),
                        device_class: d.class,
                        mode: d.mode,
                        ports,
                        as_of_ms: 0,
                    },
                )
            })
            .collect();
        // A link is up only if both ends are administratively up.
        for l in &self.links {
            let up = |e: &Endpoint, states: &BTreeMap<String, DeviceStateSnapshot>| {
                let s = &states[&e.device];
                s.mode != DeviceMode::Off
                    && e.port.is_none_or(|p| s.port(p).is_some_and(|p| p.admin_up))
            };
            let link_up = up(&l.a, &states) && up(&l.b, &states);
            if !link_up {
                for e in [&l.a, &l.b] {
                    if let Some(p) = e.port {
                        let s = states.get_mut(&e.device).expect("validated");
                        if let Some(port) = s.ports.iter_mut().find(|x| x.port_id == p) {
                            port.oper_up = false;
                            port.lpi_active = false;
                        }
                    }
                }
            }
        }
        let priorities = self
            .devices
            .values()
            .map(|d| (d.id.clone(), d.priority))
            .collect();
        let stp = converge_states(&states, &self.links, &priorities);
        assign_roles(&mut states, &stp);
        states
    }

    /// Registry of registered devices with class-default models (overrides
    /// applied) and the initial states.
    pub fn registry(&self) -> ModelRegistry {
        let mut reg = ModelRegistry::new();
        for (id, state) in self.initial_states() {
            let d = &self.devices[&id];
            if !d.registered {
                continue;
            }
            reg.bind(&d.pdu, d.socket, model_with(d), state)
                .expect("topology validation guarantees unique sockets");
        }
        reg
    }
}

fn model_with(d: &DeviceSpec) -> DevicePowerModel {
    let mut m = DevicePowerModel::default_for(d.class);
    let o = &d.model;
    if let Some(v) = o.base_w {
        m.base = v;
        if o.wake_burst_w.is_none() {
            m.wake_burst = v.scale(0.2);
        }
    }
    if let Some(v) = o.sleep_w {
        m.sleep = v;
    }
    if let Some(v) = o.off_w {
        m.off = v;
    }
    if let Some(v) = o.port_active_w {
        m.port_active = v;
    }
    if let Some(v) = o.lpi_saving_w {
        m.lpi_saving = v;
    }
    if let Some(v) = o.stp_spike_w {
        m.stp_spike = v;
    }
    if let Some(v) = o.wake_burst_w {
        m.wake_burst = v;
    }
    if let Some(v) = o.wake_burst_s {
        m.wake_burst_s = v;
    }
    m
}

/// Runs the election over operational switches and their live
/// switch-to-switch links.
pub(crate) fn converge_states(
    states: &BTreeMap<String, DeviceStateSnapshot>,
    links: &[LinkSpec],
    priorities: &BTreeMap<String, u32>,
) -> StpOutcome {
    let is_bridge = |s: &DeviceStateSnapshot| {
        s.device_class == DeviceClass::Switch && s.mode != DeviceMode::Off
    };
    let bridges: Vec<Bridge> = states
        .values()
        .filter(|s| is_bridge(s))
        .map(|s| Bridge {
            id: s.device_id.clone(),
            priority: priorities
                .get(&s.device_id)
                .copied()
                .unwrap_or(DEFAULT_BRIDGE_PRIORITY),
        })
        .collect();
    let live = |e: &Endpoint| -> Option<PortRef> {
        let s = states.get(&e.device)?;
        let p = e.port_ref()?;
        (is_bridge(s) && s.port(p.port).is_some_and(|x| x.oper_up)).then_some(p)
    };
    let stp_links: Vec<StpLink> = links
        .iter()
        .filter_map(|l| {
            Some(StpLink {
                a: live(&l.a)?,
                b: live(&l.b)?,
            })
        })
        .collect();
    stp_converge(&bridges, &stp_links)
}

/// Writes elected roles into the snapshots. Other up ports are edge ports
/// and forward as designated; down ports have no role.
pub(crate) fn assign_roles(states: &mut BTreeMap<String, DeviceStateSnapshot>, stp: &StpOutcome) {
    for s in states.values_mut() {
        for p in &mut s.ports {
            let key = PortRef {
                device: s.device_id.clone(),
                port: p.port_id,
            };
            p.stp_role = match (p.oper_up, stp.roles.get(&key)) {
                (false, _) => StpRole::None,
                (true, Some(r)) => *r,
                (true, None) => StpRole::Designated,
            };
        }
    }
}
