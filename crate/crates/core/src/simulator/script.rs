//! Scenario scripts: timed fault injections, one per line.
//!
//! ```text
//! # at_s  action      device [port] [arg]
//! 30.0    port_down   sw1    3
//! 45      set_speed   sw1    4      100
//! 60      sleep       host2
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::topology::Topology;
use crate::powermodel::{DeviceClass, DeviceMode, Speed};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Sleep {
        device: String,
    },
    Wake {
        device: String,
    },
    PowerOff {
        device: String,
    },
    PowerOn {
        device: String,
    },
    PortDown {
        device: String,
        port: u16,
    },
    PortUp {
        device: String,
        port: u16,
    },
    SetSpeed {
        device: String,
        port: u16,
        mbps: Speed,
    },
    LpiEnter {
        device: String,
        port: u16,
    },
    LpiExit {
        device: String,
        port: u16,
    },
    LinkFail {
        device: String,
        port: u16,
    },
    SetPriority {
        device: String,
        priority: u32,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Sleep { .. } => "sleep",
            Action::Wake { .. } => "wake",
            Action::PowerOff { .. } => "power_off",
            Action::PowerOn { .. } => "power_on",
            Action::PortDown { .. } => "port_down",
            Action::PortUp { .. } => "port_up",
            Action::SetSpeed { .. } => "set_speed",
            Action::LpiEnter { .. } => "lpi_enter",
            Action::LpiExit { .. } => "lpi_exit",
            Action::LinkFail { .. } => "link_fail",
            Action::SetPriority { .. } => "set_priority",
        }
    }

    pub fn device(&self) -> &str {
        match self {
            Action::Sleep { device }
            | Action::Wake { device }
            | Action::PowerOff { device }
            | Action::PowerOn { device }
            | Action::PortDown { device, .. }
            | Action::PortUp { device, .. }
            | Action::SetSpeed { device, .. }
            | Action::LpiEnter { device, .. }
            | Action::LpiExit { device, .. }
            | Action::LinkFail { device, .. }
            | Action::SetPriority { device, .. } => device,
        }
    }

    pub fn port(&self) -> Option<u16> {
        match self {
            Action::PortDown { port, .. }
            | Action::PortUp { port, .. }
            | Action::SetSpeed { port, .. }
            | Action::LpiEnter { port, .. }
            | Action::LpiExit { port, .. }
            | Action::LinkFail { port, .. } => Some(*port),
            _ => None,
        }
    }

    /// Parses `<action> <device> [<port>] [<arg>]` without checking targets.
    pub fn parse(text: &str) -> Result<Action, String> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let Some((&name, args)) = tokens.split_first() else {
            return Err("missing action".into());
        };
        let want = |n: usize| -> Result<(), String> {
            if args.len() == n {
                Ok(())
            } else {
                Err(format!(
                    "`{name}` takes {n} argument(s), got {}",
                    args.len()
                ))
            }
        };
        let port = |s: &str| -> Result<u16, String> {
            s.parse::<u16>()
                .ok()
                .filter(|p| *p > 0)
                .ok_or_else(|| format!("bad port `{s}`"))
        };
        let device = || args[0].to_string();
        Ok(match name {
            "sleep" | "wake" | "power_off" | "power_on" => {
                want(1)?;
                match name {
                    "sleep" => Action::Sleep { device: device() },
                    "wake" => Action::Wake { device: device() },
                    "power_off" => Action::PowerOff { device: device() },
                    _ => Action::PowerOn { device: device() },
                }
            }
            "port_down" | "port_up" | "lpi_enter" | "lpi_exit" | "link_fail" => {
                want(2)?;
                let (device, port) = (device(), port(args[1])?);
                match name {
                    "port_down" => Action::PortDown { device, port },
                    "port_up" => Action::PortUp { device, port },
                    "lpi_enter" => Action::LpiEnter { device, port },
                    "lpi_exit" => Action::LpiExit { device, port },
                    _ => Action::LinkFail { device, port },
                }
            }
            "set_speed" => {
                want(3)?;
                let mbps: u16 = args[2]
                    .parse()
                    .map_err(|_| format!("bad speed `{}`", args[2]))?;
                Action::SetSpeed {
                    device: device(),
                    port: port(args[1])?,
                    mbps: Speed::try_from(mbps)?,
                }
            }
            "set_priority" => {
                want(2)?;
                Action::SetPriority {
                    device: device(),
                    priority: args[1]
                        .parse()
                        .map_err(|_| format!("bad priority `{}`", args[1]))?,
                }
            }
            other => return Err(format!("unknown action `{other}`")),
        })
    }

    /// Checks that the device and port exist and that the action fits the
    /// device class.
    pub fn check_targets(&self, topology: &Topology) -> Result<(), String> {
        let d = topology
            .device(self.device())
            .ok_or_else(|| format!("unknown device `{}`", self.device()))?;
        if let Some(p) = self.port() {
            if !d.ports.iter().any(|s| s.id == p) {
                return Err(format!("device `{}` has no port {p}", d.id));
            }
        }
        if matches!(self, Action::SetPriority { .. }) && d.class != DeviceClass::Switch {
            return Err(format!("`{}` is not a switch", d.id));
        }
        Ok(())
    }
}

impl Action {
    /// The device mode after this action, or why it cannot run in `mode`.
    pub fn next_mode(&self, mode: DeviceMode) -> Result<DeviceMode, String> {
        let need = |want: DeviceMode, what: &str| {
            if mode == want {
                Ok(())
            } else {
                Err(format!("`{}` on a device that is not {what}", self.name()))
            }
        };
        match self {
            Action::PowerOn { .. } => {
                need(DeviceMode::Off, "off")?;
                return Ok(DeviceMode::Operational);
            }
            _ if mode == DeviceMode::Off => {
                return Err(format!(
                    "`{}` on powered-off device `{}`",
                    self.name(),
                    self.device()
                ));
            }
            Action::Sleep { .. } => {
                need(DeviceMode::Operational, "operational")?;
                return Ok(DeviceMode::Sleep);
            }
            Action::Wake { .. } => {
                need(DeviceMode::Sleep, "asleep")?;
                return Ok(DeviceMode::Operational);
            }
            Action::PowerOff { .. } => return Ok(DeviceMode::Off),
            _ => {}
        }
        Ok(mode)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.name(), self.device())?;
        match self {
            Action::SetSpeed { port, mbps, .. } => write!(f, " {port} {}", mbps.mbps()),
            Action::SetPriority { priority, .. } => write!(f, " {priority}"),
            other => match other.port() {
                Some(p) => write!(f, " {p}"),
                None => Ok(()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Offset from the start of the run.
    pub at_ms: u64,
    pub action: Action,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScript {
    pub entries: Vec<ScriptEntry>,
}

impl FaultScript {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parses and validates a scenario against `topology`. Device modes are
/// tracked through the script so that actions on a powered-off device
/// (other than `power_on`) fail here rather than at run time.
pub fn load_script(text: &str, topology: &Topology) -> Result<FaultScript, ScriptError> {
    let mut modes: BTreeMap<&str, DeviceMode> = topology
        .devices()
        .map(|d| (d.id.as_str(), d.mode))
        .collect();
    let mut entries = Vec::new();
    let mut last_ms = 0u64;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| ScriptError { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (at, rest) = content
            .split_once(char::is_whitespace)
            .ok_or_else(|| err("expected `<at_s> <action> <device> ...`".into()))?;
        let at_s: f64 = at
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| err(format!("bad time `{at}`")))?;
        let at_ms = (at_s * 1000.0).round() as u64;
        if at_ms < last_ms {
            return Err(err(format!(
                "time {at_s} s is earlier than the previous action"
            )));
        }
        last_ms = at_ms;
        let action = Action::parse(rest).map_err(err)?;
        action.check_targets(topology).map_err(err)?;
        let mode = modes.get_mut(action.device()).expect("targets checked");
        *mode = action.next_mode(*mode).map_err(err)?;
        entries.push(ScriptEntry {
            at_ms,
            action,
            line,
        });
    }
    Ok(FaultScript { entries })
}
