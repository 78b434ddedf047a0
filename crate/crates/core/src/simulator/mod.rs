//! Deterministic network and PDU simulator driven by scenario scripts.

mod network;
mod script;
mod source;
mod stp;
mod topology;

pub use network::{
    SimConfig, SimDevice, SimError, SimLogEntry, SimNetwork, Transient, TransientKind,
};
pub use script::{load_script, Action, FaultScript, ScriptEntry, ScriptError};
pub use source::SimSource;
pub use stp::{stp_converge, Bridge, StpLink, StpOutcome};
pub use topology::{
    DeviceSpec, Endpoint, LinkSpec, ModelOverrides, PortSpec, Topology, TopologyError,
    DEFAULT_BRIDGE_PRIORITY,
};
