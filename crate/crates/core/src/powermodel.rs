//! Parametric expected-power models, the registry binding PDU sockets to
//! devices, post-detection parameter recomputation and lifecycle energy
//! accounting.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fdi::ChangeClass;
use crate::units::Power;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("model is for a {model} but device `{device}` is a {state}")]
    ClassMismatch {
        device: String,
        model: DeviceClass,
        state: DeviceClass,
    },
    #[error("device `{device}` has no port {port}")]
    UnknownPort { device: String, port: u16 },
    #[error("{0} is not applicable to the device's current state")]
    Inapplicable(String),
    #[error("model invariant violated: {0}")]
    Invariant(String),
    #[error("timestamps must be strictly increasing ({prev} then {next})")]
    NonMonotoneTimestamps { prev: u64, next: u64 },
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("socket {pdu}/{socket} is already bound to `{device}`")]
    SocketAlreadyBound {
        pdu: String,
        socket: u16,
        device: String,
    },
    #[error("device `{0}` is already bound to a socket")]
    DeviceAlreadyBound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Switch,
    Router,
    Host,
    AccessPoint,
}

impl DeviceClass {
    pub const ALL: [DeviceClass; 4] = [
        DeviceClass::Switch,
        DeviceClass::Router,
        DeviceClass::Host,
        DeviceClass::AccessPoint,
    ];

    pub fn has_ports(self) -> bool {
        matches!(self, DeviceClass::Switch | DeviceClass::Router)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceClass::Switch => "switch",
            DeviceClass::Router => "router",
            DeviceClass::Host => "host",
            DeviceClass::AccessPoint => "access_point",
        }
    }
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceMode {
    Off,
    Sleep,
    Operational,
}

/// Negotiated link speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum Speed {
    M10,
    M100,
    M1000,
}

impl Speed {
    pub const ALL: [Speed; 3] = [Speed::M10, Speed::M100, Speed::M1000];

    pub fn mbps(self) -> u16 {
        match self {
            Speed::M10 => 10,
            Speed::M100 => 100,
            Speed::M1000 => 1000,
        }
    }
}

impl TryFrom<u16> for Speed {
    type Error = String;
    fn try_from(v: u16) -> Result<Self, String> {
        match v {
            10 => Ok(Speed::M10),
            100 => Ok(Speed::M100),
            1000 => Ok(Speed::M1000),
            other => Err(format!("unsupported link speed {other} Mb/s")),
        }
    }
}

impl From<Speed> for u16 {
    fn from(s: Speed) -> u16 {
        s.mbps()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StpRole {
    Root,
    Designated,
    Blocking,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortState {
    pub port_id: u16,
    pub admin_up: bool,
    pub oper_up: bool,
    pub speed: Speed,
    pub lpi_active: bool,
    pub stp_role: StpRole,
}

impl PortState {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.port_id == 0 {
            return Err(ModelError::Invariant("port ids start at 1".into()));
        }
        if self.oper_up && !self.admin_up {
            return Err(ModelError::Invariant(format!(
                "port {} is oper up but admin down",
                self.port_id
            )));
        }
        if self.lpi_active && !self.oper_up {
            return Err(ModelError::Invariant(format!(
                "port {} is in LPI but not oper up",
                self.port_id
            )));
        }
        Ok(())
    }

    /// Ports that draw their per-speed increment.
    pub fn is_drawing(&self) -> bool {
        self.oper_up
    }
}

/// The configuration state a power model is evaluated against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStateSnapshot {
    pub device_id: String,
    pub device_class: DeviceClass,
    pub mode: DeviceMode,
    pub ports: Vec<PortState>,
    pub as_of_ms: u64,
}

impl DeviceStateSnapshot {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.ports {
            p.validate()?;
            if !seen.insert(p.port_id) {
                return Err(ModelError::Invariant(format!(
                    "duplicate port {} on `{}`",
                    p.port_id, self.device_id
                )));
            }
            if self.mode == DeviceMode::Off && p.oper_up {
                return Err(ModelError::Invariant(format!(
                    "`{}` is off but port {} is oper up",
                    self.device_id, p.port_id
                )));
            }
        }
        Ok(())
    }

    pub fn port(&self, port_id: u16) -> Option<&PortState> {
        self.ports.iter().find(|p| p.port_id == port_id)
    }

    fn port_mut(&mut self, port_id: u16) -> Result<&mut PortState, ModelError> {
        let device = self.device_id.clone();
        self.ports
            .iter_mut()
            .find(|p| p.port_id == port_id)
            .ok_or(ModelError::UnknownPort {
                device,
                port: port_id,
            })
    }
}

/// Per-port increment for each negotiated speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortIncrements {
    #[serde(rename = "10")]
    pub m10: Power,
    #[serde(rename = "100")]
    pub m100: Power,
    #[serde(rename = "1000")]
    pub m1000: Power,
}

impl PortIncrements {
    pub fn get(&self, speed: Speed) -> Power {
        match speed {
            Speed::M10 => self.m10,
            Speed::M100 => self.m100,
            Speed::M1000 => self.m1000,
        }
    }

    pub fn set(&mut self, speed: Speed, value: Power) {
        match speed {
            Speed::M10 => self.m10 = value,
            Speed::M100 => self.m100 = value,
            Speed::M1000 => self.m1000 = value,
        }
    }
}

/// Additive power model: chassis base plus per-port increments by speed,
/// minus LPI savings, plus transient terms used by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevicePowerModel {
    pub device_class: DeviceClass,
    /// Operational, zero traffic, all ports down.
    #[serde(rename = "base_w")]
    pub base: Power,
    #[serde(rename = "sleep_w")]
    pub sleep: Power,
    #[serde(rename = "off_w")]
    pub off: Power,
    #[serde(rename = "port_active_w")]
    pub port_active: PortIncrements,
    #[serde(rename = "lpi_saving_w")]
    pub lpi_saving: Power,
    #[serde(rename = "stp_spike_w")]
    pub stp_spike: Power,
    #[serde(rename = "wake_burst_w")]
    pub wake_burst: Power,
    pub wake_burst_s: f64,
    #[serde(default)]
    pub calibrated_at_ms: Option<u64>,
}

impl DevicePowerModel {
    pub fn default_for(class: DeviceClass) -> Self {
        let w = Power::from_watts;
        let switch_ports = PortIncrements {
            m10: w(0.35),
            m100: w(0.35),
            m1000: w(0.65),
        };
        let no_ports = PortIncrements {
            m10: Power::ZERO,
            m100: Power::ZERO,
            m1000: Power::ZERO,
        };
        let (base, sleep, off, ports, lpi, spike) = match class {
            DeviceClass::Switch => (w(45.0), w(20.0), w(0.3), switch_ports, w(0.35), w(1.0)),
            DeviceClass::Router => (w(35.0), w(15.0), w(0.3), switch_ports, w(0.35), w(1.0)),
            DeviceClass::Host => (w(60.0), w(3.0), w(0.5), no_ports, Power::ZERO, Power::ZERO),
            DeviceClass::AccessPoint => {
                (w(8.0), w(2.0), w(0.2), no_ports, Power::ZERO, Power::ZERO)
            }
        };
        DevicePowerModel {
            device_class: class,
            base,
            sleep,
            off,
            port_active: ports,
            lpi_saving: lpi,
            stp_spike: spike,
            wake_burst: base.scale(0.2),
            wake_burst_s: 5.0,
            calibrated_at_ms: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let nonneg = [
            ("off_w", self.off),
            ("sleep_w", self.sleep),
            ("base_w", self.base),
            ("stp_spike_w", self.stp_spike),
            ("wake_burst_w", self.wake_burst),
            ("lpi_saving_w", self.lpi_saving),
        ];
        for (name, v) in nonneg {
            if v < Power::ZERO {
                return Err(ModelError::Invariant(format!("{name} must be >= 0")));
            }
        }
        if !(self.off <= self.sleep && self.sleep <= self.base) {
            return Err(ModelError::Invariant(format!(
                "expected off_w <= sleep_w <= base_w, got {} / {} / {}",
                self.off, self.sleep, self.base
            )));
        }
        let p = &self.port_active;
        if !(Power::ZERO <= p.m10 && p.m10 <= p.m100 && p.m100 <= p.m1000) {
            return Err(ModelError::Invariant(format!(
                "port increments must be non-decreasing in speed, got {} / {} / {}",
                p.m10, p.m100, p.m1000
            )));
        }
        if Speed::ALL.iter().any(|s| self.lpi_saving > p.get(*s)) {
            return Err(ModelError::Invariant(format!(
                "lpi_saving_w {} exceeds a per-port increment",
                self.lpi_saving
            )));
        }
        if !(self.wake_burst_s.is_finite() && self.wake_burst_s >= 0.0) {
            return Err(ModelError::Invariant("wake_burst_s must be >= 0".into()));
        }
        Ok(())
    }

    /// Contribution of one port in its current state.
    pub fn port_power(&self, port: &PortState) -> Power {
        if !port.is_drawing() {
            return Power::ZERO;
        }
        let mut p = self.port_active.get(port.speed);
        if port.lpi_active {
            p -= self.lpi_saving;
        }
        p
    }

    fn ports_power(&self, state: &DeviceStateSnapshot) -> Power {
        state.ports.iter().map(|p| self.port_power(p)).sum()
    }
}

/// Expected steady-state power of a device in the given state. STP roles do
/// not enter: a blocking port draws the same as a designated one.
pub fn expected_power(
    model: &DevicePowerModel,
    state: &DeviceStateSnapshot,
) -> Result<Power, ModelError> {
    if model.device_class != state.device_class {
        return Err(ModelError::ClassMismatch {
            device: state.device_id.clone(),
            model: model.device_class,
            state: state.device_class,
        });
    }
    Ok(match state.mode {
        DeviceMode::Off => model.off,
        DeviceMode::Sleep => model.sleep,
        DeviceMode::Operational => model.base + model.ports_power(state),
    })
}

/// A concrete state change: a knowledge-base class applied to a port (or the
/// whole device) of a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub class: ChangeClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_speed: Option<Speed>,
}

impl StateChange {
    pub fn device(class: ChangeClass) -> Self {
        StateChange {
            class,
            port: None,
            to_speed: None,
        }
    }

    pub fn port(class: ChangeClass, port: u16) -> Self {
        StateChange {
            class,
            port: Some(port),
            to_speed: None,
        }
    }

    pub fn speed(class: ChangeClass, port: u16, to: Speed) -> Self {
        StateChange {
            class,
            port: Some(port),
            to_speed: Some(to),
        }
    }
}

impl fmt::Display for StateChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.class)?;
        if let Some(p) = self.port {
            write!(f, " on port {p}")?;
        }
        if let Some(s) = self.to_speed {
            write!(f, " to {} Mb/s", s.mbps())?;
        }
        Ok(())
    }
}

/// Applies a change to a snapshot without touching the model.
pub fn apply_change(
    state: &DeviceStateSnapshot,
    change: &StateChange,
) -> Result<DeviceStateSnapshot, ModelError> {
    let mut next = state.clone();
    let need_port = |c: &StateChange| {
        c.port
            .ok_or_else(|| ModelError::Inapplicable(format!("{} needs a port", c.class)))
    };
    let inapplicable = |why: &str| ModelError::Inapplicable(format!("{change}: {why}"));
    match change.class {
        ChangeClass::PortDown => {
            let p = next.port_mut(need_port(change)?)?;
            if !p.oper_up {
                return Err(inapplicable("port is not up"));
            }
            p.admin_up = false;
            p.oper_up = false;
            p.lpi_active = false;
            p.stp_role = StpRole::None;
        }
        ChangeClass::PortUp => {
            if next.mode != crate::powermodel::DeviceMode::Operational {
                return Err(inapplicable("device is not operational"));
            }
            let p = next.port_mut(need_port(change)?)?;
            if p.oper_up {
                return Err(inapplicable("port is already up"));
            }
            p.admin_up = true;
            p.oper_up = true;
            p.lpi_active = false;
            p.stp_role = StpRole::Designated;
        }
        ChangeClass::LinkRateDown | ChangeClass::LinkRateUp | ChangeClass::LinkRateNoop => {
            let to = change
                .to_speed
                .ok_or_else(|| inapplicable("target speed missing"))?;
            let p = next.port_mut(need_port(change)?)?;
            if !p.oper_up {
                return Err(inapplicable("port is not up"));
            }
            let ok = match change.class {
                ChangeClass::LinkRateDown => to < p.speed,
                ChangeClass::LinkRateUp => to > p.speed,
                _ => to != p.speed,
            };
            if !ok {
                return Err(inapplicable("speed change has the wrong direction"));
            }
            p.speed = to;
        }
        ChangeClass::EeeLpiEnter => {
            let p = next.port_mut(need_port(change)?)?;
            if !p.oper_up || p.lpi_active {
                return Err(inapplicable("port must be up and active"));
            }
            p.lpi_active = true;
        }
        ChangeClass::EeeLpiExit => {
            let p = next.port_mut(need_port(change)?)?;
            if !p.lpi_active {
                return Err(inapplicable("port is not in LPI"));
            }
            p.lpi_active = false;
        }
        ChangeClass::StpReevaluation => {}
        ChangeClass::Sleep => {
            if next.mode != DeviceMode::Operational {
                return Err(inapplicable("device is not operational"));
            }
            next.mode = DeviceMode::Sleep;
        }
        ChangeClass::Wake => {
            if next.mode != DeviceMode::Sleep {
                return Err(inapplicable("device is not asleep"));
            }
            next.mode = DeviceMode::Operational;
        }
        ChangeClass::DeviceOff => {
            if next.mode == DeviceMode::Off {
                return Err(inapplicable("device is already off"));
            }
            next.mode = DeviceMode::Off;
            for p in &mut next.ports {
                p.oper_up = false;
                p.lpi_active = false;
                p.stp_role = StpRole::None;
            }
        }
        ChangeClass::DeviceOn => {
            if next.mode != DeviceMode::Off {
                return Err(inapplicable("device is not off"));
            }
            next.mode = DeviceMode::Operational;
            for p in &mut next.ports {
                p.oper_up = p.admin_up;
                if p.oper_up {
                    p.stp_role = StpRole::Designated;
                }
            }
        }
        ChangeClass::Unknown => return Err(inapplicable("unknown changes cannot be applied")),
    }
    Ok(next)
}

/// Signed change of expected power caused by `change`.
pub fn modeled_delta(
    model: &DevicePowerModel,
    state: &DeviceStateSnapshot,
    change: &StateChange,
) -> Result<Power, ModelError> {
    let after = apply_change(state, change)?;
    Ok(expected_power(model, &after)? - expected_power(model, state)?)
}

/// Every concrete change of `class` that the snapshot structurally allows.
pub fn feasible_changes(state: &DeviceStateSnapshot, class: ChangeClass) -> Vec<StateChange> {
    let operational = state.mode == DeviceMode::Operational;
    let mut out = Vec::new();
    match class {
        ChangeClass::PortDown if operational => {
            for p in state.ports.iter().filter(|p| p.oper_up && !p.lpi_active) {
                out.push(StateChange::port(class, p.port_id));
            }
        }
        ChangeClass::PortUp if operational => {
            for p in state.ports.iter().filter(|p| !p.oper_up) {
                out.push(StateChange::port(class, p.port_id));
            }
        }
        ChangeClass::LinkRateDown | ChangeClass::LinkRateUp if operational => {
            for p in state.ports.iter().filter(|p| p.oper_up) {
                for to in Speed::ALL {
                    let dir_ok = if class == ChangeClass::LinkRateDown {
                        to < p.speed
                    } else {
                        to > p.speed
                    };
                    if dir_ok {
                        out.push(StateChange::speed(class, p.port_id, to));
                    }
                }
            }
        }
        ChangeClass::EeeLpiEnter if operational => {
            for p in state.ports.iter().filter(|p| p.oper_up && !p.lpi_active) {
                out.push(StateChange::port(class, p.port_id));
            }
        }
        ChangeClass::EeeLpiExit if operational => {
            for p in state.ports.iter().filter(|p| p.lpi_active) {
                out.push(StateChange::port(class, p.port_id));
            }
        }
        ChangeClass::StpReevaluation
            if operational && state.device_class == DeviceClass::Switch =>
        {
            out.push(StateChange::device(class));
        }
        ChangeClass::Sleep if operational => out.push(StateChange::device(class)),
        ChangeClass::Wake if state.mode == DeviceMode::Sleep => {
            out.push(StateChange::device(class))
        }
        ChangeClass::DeviceOff if state.mode != DeviceMode::Off => {
            out.push(StateChange::device(class))
        }
        ChangeClass::DeviceOn if state.mode == DeviceMode::Off => {
            out.push(StateChange::device(class))
        }
        _ => {}
    }
    out
}

/// Updates the snapshot for a detected change and, when the observed step
/// deviates from the modeled one by more than `adopt_fraction`, adopts the
/// observed amplitude into the model. Returns `(model, snapshot, adopted)`.
///
/// Adoption that would break a model invariant is skipped.
pub fn recompute_parameters(
    model: &DevicePowerModel,
    state_before: &DeviceStateSnapshot,
    change: &StateChange,
    observed: Option<Power>,
    adopt_fraction: f64,
) -> Result<(DevicePowerModel, DeviceStateSnapshot, bool), ModelError> {
    let after = apply_change(state_before, change)?;
    let modeled = expected_power(model, &after)? - expected_power(model, state_before)?;
    let Some(obs) = observed else {
        return Ok((model.clone(), after, false));
    };
    let deviation = (obs - modeled).abs().watts();
    if deviation <= adopt_fraction * modeled.abs().watts() {
        return Ok((model.clone(), after, false));
    }
    let mut next = model.clone();
    let port_before = change.port.and_then(|p| state_before.port(p));
    match change.class {
        ChangeClass::PortDown | ChangeClass::PortUp => {
            let port = port_before.expect("port change validated by apply_change");
            if port.lpi_active {
                return Ok((model.clone(), after, false));
            }
            next.port_active.set(port.speed, obs.abs());
        }
        ChangeClass::LinkRateDown | ChangeClass::LinkRateUp => {
            let port = port_before.expect("speed change validated by apply_change");
            let to = change
                .to_speed
                .expect("speed change validated by apply_change");
            if change.class == ChangeClass::LinkRateDown {
                next.port_active
                    .set(port.speed, next.port_active.get(to) + obs.abs());
            } else {
                next.port_active
                    .set(to, next.port_active.get(port.speed) + obs.abs());
            }
        }
        ChangeClass::EeeLpiEnter | ChangeClass::EeeLpiExit => {
            next.lpi_saving = obs.abs();
        }
        ChangeClass::Sleep => {
            next.sleep = expected_power(model, state_before)? + obs;
        }
        ChangeClass::DeviceOff => {
            next.off = expected_power(model, state_before)? + obs;
        }
        ChangeClass::Wake | ChangeClass::DeviceOn => {
            let target = expected_power(model, state_before)? + obs;
            next.base = target - model.ports_power(&after);
        }
        ChangeClass::StpReevaluation | ChangeClass::LinkRateNoop | ChangeClass::Unknown => {
            return Ok((model.clone(), after, false));
        }
    }
    if after.mode == DeviceMode::Operational
        && matches!(
            change.class,
            ChangeClass::PortDown
                | ChangeClass::PortUp
                | ChangeClass::LinkRateDown
                | ChangeClass::LinkRateUp
                | ChangeClass::EeeLpiEnter
                | ChangeClass::EeeLpiExit
        )
    {
        // Other ports share the adopted increment; keep the calibrated level.
        let target = expected_power(model, state_before)? + obs;
        next.base = target - next.ports_power(&after);
    }
    if next.validate().is_err() {
        return Ok((model.clone(), after, false));
    }
    Ok((next, after, true))
}

/// Sets the mode-level parameter so the model predicts `measured` for `state`.
pub fn calibrate_level(
    model: &DevicePowerModel,
    state: &DeviceStateSnapshot,
    measured: Power,
    at_ms: u64,
) -> Result<DevicePowerModel, ModelError> {
    let mut next = model.clone();
    match state.mode {
        DeviceMode::Operational => next.base = measured - model.ports_power(state),
        DeviceMode::Sleep => next.sleep = measured,
        DeviceMode::Off => next.off = measured,
    }
    next.calibrated_at_ms = Some(at_ms);
    next.validate()?;
    Ok(next)
}

/// Devices keyed by id, each with its model and current (inferred) snapshot,
/// and the socket each device is plugged into.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    devices: BTreeMap<String, RegisteredDevice>,
    bindings: BTreeMap<String, BTreeMap<u16, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisteredDevice {
    pub model: DevicePowerModel,
    pub state: DeviceStateSnapshot,
    pub pdu_id: String,
    pub socket_id: u16,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(
        &mut self,
        pdu_id: &str,
        socket_id: u16,
        model: DevicePowerModel,
        state: DeviceStateSnapshot,
    ) -> Result<(), ModelError> {
        let device_id = state.device_id.clone();
        if let Some(existing) = self.device_at(pdu_id, socket_id) {
            return Err(ModelError::SocketAlreadyBound {
                pdu: pdu_id.to_string(),
                socket: socket_id,
                device: existing.to_string(),
            });
        }
        if self.devices.contains_key(&device_id) {
            return Err(ModelError::DeviceAlreadyBound(device_id));
        }
        model.validate()?;
        state.validate()?;
        expected_power(&model, &state)?;
        self.bindings
            .entry(pdu_id.to_string())
            .or_default()
            .insert(socket_id, device_id.clone());
        self.devices.insert(
            device_id,
            RegisteredDevice {
                model,
                state,
                pdu_id: pdu_id.to_string(),
                socket_id,
            },
        );
        Ok(())
    }

    pub fn device_at(&self, pdu_id: &str, socket_id: u16) -> Option<&str> {
        self.bindings
            .get(pdu_id)
            .and_then(|m| m.get(&socket_id))
            .map(String::as_str)
    }

    pub fn device(&self, device_id: &str) -> Option<&RegisteredDevice> {
        self.devices.get(device_id)
    }

    pub fn devices(&self) -> impl Iterator<Item = (&str, &RegisteredDevice)> {
        self.devices.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn pdu_ids(&self) -> impl Iterator<Item = &str> {
        self.bindings.keys().map(String::as_str)
    }

    pub fn sockets_of(&self, pdu_id: &str) -> Vec<(u16, &str)> {
        self.bindings
            .get(pdu_id)
            .map(|m| m.iter().map(|(s, d)| (*s, d.as_str())).collect())
            .unwrap_or_default()
    }

    /// Replaces a device's model and snapshot.
    pub fn update(
        &mut self,
        device_id: &str,
        model: DevicePowerModel,
        state: DeviceStateSnapshot,
    ) -> Result<(), ModelError> {
        let entry = self
            .devices
            .get_mut(device_id)
            .ok_or_else(|| ModelError::UnknownDevice(device_id.to_string()))?;
        model.validate()?;
        state.validate()?;
        expected_power(&model, &state)?;
        entry.model = model;
        entry.state = state;
        Ok(())
    }

    pub fn expected(&self, device_id: &str) -> Result<Power, ModelError> {
        let d = self
            .device(device_id)
            .ok_or_else(|| ModelError::UnknownDevice(device_id.to_string()))?;
        expected_power(&d.model, &d.state)
    }
}

/// Lifecycle energy: manufacturing/transport, use phase, dismantling.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LifecycleAccount {
    pub e_m_joules: f64,
    pub e_d_joules: f64,
    /// Use-phase integral in nanojoules, exact for milliwatt x millisecond inputs.
    e_u_nanojoules: u128,
}

impl LifecycleAccount {
    pub fn new(e_m_joules: f64, e_d_joules: f64) -> Self {
        LifecycleAccount {
            e_m_joules: e_m_joules.max(0.0),
            e_d_joules: e_d_joules.max(0.0),
            e_u_nanojoules: 0,
        }
    }

    pub fn e_u_joules(&self) -> f64 {
        self.e_u_nanojoules as f64 / 1e9
    }

    pub fn e_u_nanojoules(&self) -> u128 {
        self.e_u_nanojoules
    }
}

/// One element of a power series fed to [`accumulate_usage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UsageSample {
    At {
        ts_ms: u64,
        power: Power,
    },
    /// Missed poll: no energy is attributed across it.
    Gap,
}

/// Adds the trapezoidal integral of the series to the use-phase energy.
/// Negative readings count as zero.
pub fn accumulate_usage(
    acct: &LifecycleAccount,
    samples: &[UsageSample],
) -> Result<LifecycleAccount, ModelError> {
    let mut total = acct.e_u_nanojoules;
    let mut prev: Option<(u64, Power)> = None;
    let mut last_ts: Option<u64> = None;
    for s in samples {
        match *s {
            UsageSample::Gap => prev = None,
            UsageSample::At { ts_ms, power } => {
                if let Some(l) = last_ts {
                    if ts_ms <= l {
                        return Err(ModelError::NonMonotoneTimestamps {
                            prev: l,
                            next: ts_ms,
                        });
                    }
                }
                last_ts = Some(ts_ms);
                if let Some((pts, pp)) = prev {
                    let sum_mw = (pp.milliwatts().max(0) + power.milliwatts().max(0)) as u128;
                    // (mW + mW) / 2 * ms = uJ; x1000 for nJ.
                    total += sum_mw * (ts_ms - pts) as u128 * 500;
                }
                prev = Some((ts_ms, power));
            }
        }
    }
    Ok(LifecycleAccount {
        e_u_nanojoules: total,
        ..*acct
    })
}

/// E = E_m + E_u + E_d, in joules.
pub fn lifecycle_total(acct: &LifecycleAccount) -> f64 {
    acct.e_m_joules + acct.e_u_joules() + acct.e_d_joules
}

/// Operational-baseline range for one device class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRange {
    pub class: DeviceClass,
    pub min_w: f64,
    pub max_w: f64,
}

pub fn default_class_ranges() -> Vec<ClassRange> {
    vec![
        ClassRange {
            class: DeviceClass::AccessPoint,
            min_w: 2.0,
            max_w: 15.0,
        },
        ClassRange {
            class: DeviceClass::Router,
            min_w: 20.0,
            max_w: 40.0,
        },
        ClassRange {
            class: DeviceClass::Switch,
            min_w: 40.0,
            max_w: 55.0,
        },
        ClassRange {
            class: DeviceClass::Host,
            min_w: 55.0,
            max_w: 250.0,
        },
    ]
}

/// The unique class whose range contains `baseline`; `None` when no range or
/// more than one range matches.
pub fn classify_socket(baseline: Power, table: &[ClassRange]) -> Option<DeviceClass> {
    let w = baseline.watts();
    let mut hits = table.iter().filter(|r| r.min_w <= w && w <= r.max_w);
    let first = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    Some(first.class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(v: f64) -> Power {
        Power::from_watts(v)
    }

    fn port(id: u16, up: bool, speed: Speed) -> PortState {
        PortState {
            port_id: id,
            admin_up: up,
            oper_up: up,
            speed,
            lpi_active: false,
            stp_role: if up {
                StpRole::Designated
            } else {
                StpRole::None
            },
        }
    }

    fn switch(ports: Vec<PortState>) -> DeviceStateSnapshot {
        DeviceStateSnapshot {
            device_id: "sw1".into(),
            device_class: DeviceClass::Switch,
            mode: DeviceMode::Operational,
            ports,
            as_of_ms: 0,
        }
    }

    fn example_model() -> DevicePowerModel {
        let mut m = DevicePowerModel::default_for(DeviceClass::Switch);
        m.port_active.m1000 = w(0.4);
        m
    }

    #[test]
    fn defaults_are_valid() {
        for c in DeviceClass::ALL {
            DevicePowerModel::default_for(c).validate().unwrap();
        }
    }

    #[test]
    fn expected_power_examples() {
        let m = example_model();
        let s = switch(vec![
            port(1, true, Speed::M1000),
            port(2, true, Speed::M1000),
        ]);
        assert_eq!(expected_power(&m, &s).unwrap(), w(45.8));

        let mut lpi = s.clone();
        lpi.ports[1].lpi_active = true;
        assert_eq!(expected_power(&m, &lpi).unwrap(), w(45.45));

        let host = DeviceStateSnapshot {
            device_id: "h".into(),
            device_class: DeviceClass::Host,
            mode: DeviceMode::Sleep,
            ports: vec![],
            as_of_ms: 0,
        };
        let hm = DevicePowerModel::default_for(DeviceClass::Host);
        assert_eq!(expected_power(&hm, &host).unwrap(), w(3.0));
        assert!(matches!(
            expected_power(&m, &host),
            Err(ModelError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn blocking_draws_like_designated() {
        let m = example_model();
        let mut s = switch(vec![
            port(1, true, Speed::M1000),
            port(2, true, Speed::M100),
        ]);
        let designated = expected_power(&m, &s).unwrap();
        s.ports[1].stp_role = StpRole::Blocking;
        assert_eq!(expected_power(&m, &s).unwrap(), designated);
    }

    #[test]
    fn port_down_drops_increment() {
        let m = DevicePowerModel::default_for(DeviceClass::Switch);
        let s = switch((1..=4).map(|i| port(i, true, Speed::M100)).collect());
        let change = StateChange::port(ChangeClass::PortDown, 3);
        let (m2, s2, adopted) = recompute_parameters(&m, &s, &change, None, 0.2).unwrap();
        assert!(!adopted);
        assert!(!s2.port(3).unwrap().oper_up);
        assert_eq!(
            expected_power(&m2, &s2).unwrap(),
            expected_power(&m, &s).unwrap() - m.port_active.m100
        );
    }

    #[test]
    fn link_rate_change_updates_speed() {
        let m = DevicePowerModel::default_for(DeviceClass::Switch);
        let s = switch(vec![port(1, true, Speed::M1000)]);
        let change = StateChange::speed(ChangeClass::LinkRateDown, 1, Speed::M100);
        let (m2, s2, _) = recompute_parameters(&m, &s, &change, None, 0.2).unwrap();
        assert_eq!(s2.port(1).unwrap().speed, Speed::M100);
        assert_eq!(
            expected_power(&m2, &s2).unwrap() - expected_power(&m, &s).unwrap(),
            -(m.port_active.m1000 - m.port_active.m100)
        );
    }

    #[test]
    fn observed_amplitude_adopted_past_fraction() {
        let mut m = DevicePowerModel::default_for(DeviceClass::Switch);
        m.port_active = PortIncrements {
            m10: w(0.3),
            m100: w(0.3),
            m1000: w(0.65),
        };
        m.lpi_saving = w(0.3);
        let s = switch(vec![port(1, true, Speed::M100), port(2, true, Speed::M100)]);
        let change = StateChange::port(ChangeClass::PortDown, 2);
        let (m2, _, adopted) = recompute_parameters(&m, &s, &change, Some(w(-0.38)), 0.2).unwrap();
        assert!(adopted);
        assert_eq!(m2.port_active.m100, w(0.38));

        // Within the fraction: unchanged.
        let (m3, _, adopted) = recompute_parameters(&m, &s, &change, Some(w(-0.32)), 0.2).unwrap();
        assert!(!adopted);
        assert_eq!(m3, m);
    }

    #[test]
    fn unknown_port_is_contract_error() {
        let m = DevicePowerModel::default_for(DeviceClass::Switch);
        let s = switch(vec![port(1, true, Speed::M100)]);
        let err = recompute_parameters(
            &m,
            &s,
            &StateChange::port(ChangeClass::PortDown, 9),
            None,
            0.2,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::UnknownPort { port: 9, .. }));
    }

    #[test]
    fn usage_examples() {
        let acct = LifecycleAccount::default();
        let constant: Vec<_> = (0..=3600u64)
            .map(|t| UsageSample::At {
                ts_ms: t * 1000,
                power: w(10.0),
            })
            .collect();
        let a = accumulate_usage(&acct, &constant).unwrap();
        assert_eq!(a.e_u_joules(), 36000.0);
        assert_eq!(lifecycle_total(&a), 36000.0);

        let single = [UsageSample::At {
            ts_ms: 5,
            power: w(10.0),
        }];
        assert_eq!(accumulate_usage(&acct, &single).unwrap().e_u_joules(), 0.0);

        let ramp: Vec<_> = (0..=10u64)
            .map(|t| UsageSample::At {
                ts_ms: t * 1000,
                power: w(t as f64),
            })
            .collect();
        assert_eq!(accumulate_usage(&acct, &ramp).unwrap().e_u_joules(), 50.0);
    }

    #[test]
    fn gaps_contribute_nothing() {
        let s = [
            UsageSample::At {
                ts_ms: 0,
                power: w(10.0),
            },
            UsageSample::Gap,
            UsageSample::At {
                ts_ms: 5000,
                power: w(10.0),
            },
            UsageSample::At {
                ts_ms: 6000,
                power: w(10.0),
            },
        ];
        let a = accumulate_usage(&LifecycleAccount::default(), &s).unwrap();
        assert_eq!(a.e_u_joules(), 10.0);
    }

    #[test]
    fn non_monotone_usage_rejected() {
        let s = [
            UsageSample::At {
                ts_ms: 10,
                power: w(1.0),
            },
            UsageSample::At {
                ts_ms: 10,
                power: w(1.0),
            },
        ];
        assert!(accumulate_usage(&LifecycleAccount::default(), &s).is_err());
    }

    #[test]
    fn lifecycle_total_examples() {
        assert_eq!(lifecycle_total(&LifecycleAccount::default()), 0.0);
        let mut a = LifecycleAccount::new(5e8, 2e7);
        a.e_u_nanojoules = 36_000_000_000_000;
        assert_eq!(lifecycle_total(&a), 5.20036e8);
    }

    #[test]
    fn classify_examples() {
        let table = [
            ClassRange {
                class: DeviceClass::Switch,
                min_w: 30.0,
                max_w: 80.0,
            },
            ClassRange {
                class: DeviceClass::Host,
                min_w: 80.0,
                max_w: 200.0,
            },
        ];
        assert_eq!(classify_socket(w(45.6), &table), Some(DeviceClass::Switch));
        let overlapping = [
            table[0],
            table[1],
            ClassRange {
                class: DeviceClass::Router,
                min_w: 70.0,
                max_w: 90.0,
            },
        ];
        assert_eq!(classify_socket(w(85.0), &overlapping), None);
        assert_eq!(classify_socket(w(0.2), &table), None);
    }

    #[test]
    fn registry_binding_is_one_to_one() {
        let mut r = ModelRegistry::new();
        let m = DevicePowerModel::default_for(DeviceClass::Switch);
        r.bind("p", 1, m.clone(), switch(vec![])).unwrap();
        let mut other = switch(vec![]);
        other.device_id = "sw2".into();
        assert!(matches!(
            r.bind("p", 1, m.clone(), other.clone()),
            Err(ModelError::SocketAlreadyBound { .. })
        ));
        assert!(matches!(
            r.bind("p", 2, m, switch(vec![])),
            Err(ModelError::DeviceAlreadyBound(_))
        ));
        assert_eq!(r.device_at("p", 1), Some("sw1"));
    }

    fn arb_switch() -> impl Strategy<Value = (DevicePowerModel, DeviceStateSnapshot)> {
        let ports = prop::collection::vec((any::<bool>(), 0usize..3, any::<bool>()), 1..8);
        (ports, 100i64..600, 0i64..400).prop_map(|(ports, a100, extra)| {
            let mut m = DevicePowerModel::default_for(DeviceClass::Switch);
            m.port_active = PortIncrements {
                m10: Power::from_milliwatts(a100),
                m100: Power::from_milliwatts(a100),
                m1000: Power::from_milliwatts(a100 + extra),
            };
            m.lpi_saving = Power::from_milliwatts(a100 / 2);
            let ports = ports
                .into_iter()
                .enumerate()
                .map(|(i, (up, sp, lpi))| PortState {
                    port_id: i as u16 + 1,
                    admin_up: up,
                    oper_up: up,
                    speed: Speed::ALL[sp],
                    lpi_active: up && lpi,
                    stp_role: StpRole::Designated,
                })
                .collect();
            (m, switch(ports))
        })
    }

    proptest! {
        #[test]
        fn recompute_delta_matches_modeled_delta((m, s) in arb_switch(), class_idx in 0usize..12) {
            let class = ChangeClass::DETECTABLE[class_idx % ChangeClass::DETECTABLE.len()];
            for change in feasible_changes(&s, class) {
                let delta = modeled_delta(&m, &s, &change).unwrap();
                let (m2, s2, adopted) = recompute_parameters(&m, &s, &change, None, 0.2).unwrap();
                prop_assert!(!adopted);
                prop_assert_eq!(
                    expected_power(&m2, &s2).unwrap() - expected_power(&m, &s).unwrap(),
                    delta
                );
            }
        }

        #[test]
        fn expected_power_monotone_in_ports_and_speed((m, s) in arb_switch(), idx in 0usize..8) {
            let base = expected_power(&m, &s).unwrap();
            let i = idx % s.ports.len();
            let mut more = s.clone();
            if !more.ports[i].oper_up {
                more.ports[i].admin_up = true;
                more.ports[i].oper_up = true;
                prop_assert!(expected_power(&m, &more).unwrap() >= base);
            }
            let mut faster = s.clone();
            if faster.ports[i].speed != Speed::M1000 {
                faster.ports[i].speed = Speed::M1000;
                prop_assert!(expected_power(&m, &faster).unwrap() >= base);
            }
            let mut blocking = s.clone();
            blocking.ports[i].stp_role = StpRole::Blocking;
            prop_assert_eq!(expected_power(&m, &blocking).unwrap(), base);
        }

        #[test]
        fn usage_is_additive_over_concatenation(
            powers in prop::collection::vec(0i64..200_000, 2..60),
            split in 1usize..59,
        ) {
            let series: Vec<_> = powers.iter().enumerate().map(|(i, p)| UsageSample::At {
                ts_ms: i as u64 * 1000,
                power: Power::from_milliwatts(*p),
            }).collect();
            let k = split.min(series.len() - 1);
            let zero = LifecycleAccount::default();
            let whole = accumulate_usage(&zero, &series).unwrap();
            let a = accumulate_usage(&zero, &series[..=k]).unwrap();
            let b = accumulate_usage(&zero, &series[k..]).unwrap();
            prop_assert_eq!(whole.e_u_nanojoules(), a.e_u_nanojoules() + b.e_u_nanojoules());
        }
    }
}
