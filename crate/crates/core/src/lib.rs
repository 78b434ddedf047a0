//! Fault detection and isolation for network infrastructure from per-socket
//! PDU power telemetry.

pub mod fdi;
pub mod powermodel;
pub mod runner;
pub mod simulator;
pub mod store;
pub mod telemetry;
pub mod units;

pub use fdi::{
    ChangeClass, DetectionEvent, FdiConfig, IsolationResult, KnowledgeBase, Pipeline,
    PipelineOutput, Verdict,
};
pub use powermodel::{
    DeviceClass, DeviceMode, DevicePowerModel, DeviceStateSnapshot, ModelRegistry, Speed,
};
pub use store::Store;
pub use telemetry::{ProbeResponse, SocketSample};
pub use units::Power;
