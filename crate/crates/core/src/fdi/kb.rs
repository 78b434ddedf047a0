//! Signature knowledge base: benchmarked power-change patterns mapped to
//! network state changes, plus the per-device event history.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::powermodel::DeviceClass;

/// Network state changes that the knowledge base can recognise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChangeClass {
    PortDown,
    PortUp,
    LinkRateDown,
    LinkRateUp,
    LinkRateNoop,
    #[serde(rename = "EEE_LPI_Enter")]
    EeeLpiEnter,
    #[serde(rename = "EEE_LPI_Exit")]
    EeeLpiExit,
    #[serde(rename = "STPReevaluation")]
    StpReevaluation,
    Sleep,
    Wake,
    DeviceOff,
    DeviceOn,
    Unknown,
}

impl ChangeClass {
    /// Classes that can be the outcome of a detection.
    pub const DETECTABLE: [ChangeClass; 11] = [
        ChangeClass::PortDown,
        ChangeClass::PortUp,
        ChangeClass::LinkRateDown,
        ChangeClass::LinkRateUp,
        ChangeClass::EeeLpiEnter,
        ChangeClass::EeeLpiExit,
        ChangeClass::StpReevaluation,
        ChangeClass::Sleep,
        ChangeClass::Wake,
        ChangeClass::DeviceOff,
        ChangeClass::DeviceOn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChangeClass::PortDown => "PortDown",
            ChangeClass::PortUp => "PortUp",
            ChangeClass::LinkRateDown => "LinkRateDown",
            ChangeClass::LinkRateUp => "LinkRateUp",
            ChangeClass::LinkRateNoop => "LinkRateNoop",
            ChangeClass::EeeLpiEnter => "EEE_LPI_Enter",
            ChangeClass::EeeLpiExit => "EEE_LPI_Exit",
            ChangeClass::StpReevaluation => "STPReevaluation",
            ChangeClass::Sleep => "Sleep",
            ChangeClass::Wake => "Wake",
            ChangeClass::DeviceOff => "DeviceOff",
            ChangeClass::DeviceOn => "DeviceOn",
            ChangeClass::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for ChangeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChangeClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown change class `{s}`"))
    }
}

/// Shape of a segmented change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Step,
    Spike,
    BurstThenStep,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Step => "step",
            FeatureKind::Spike => "spike",
            FeatureKind::BurstThenStep => "burst_then_step",
        })
    }
}

/// Amplitude band of a signature, in watts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AmplitudeBand {
    Fixed {
        lo_w: f64,
        hi_w: f64,
    },
    /// Centred on the device model's own delta for the change, with half
    /// width `max(fraction x |delta|, theta)`.
    ModelDerived {
        fraction: f64,
    },
}

/// Duration band of a transient, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DurationBand {
    Fixed {
        lo_s: f64,
        hi_s: f64,
    },
    /// `[min_s, factor x wake_burst_s]` of the device model.
    WakeBurst {
        min_s: f64,
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureEntry {
    pub change_class: ChangeClass,
    pub shape: FeatureKind,
    pub amplitude: AmplitudeBand,
    #[serde(default)]
    pub duration: Option<DurationBand>,
    pub applicable_classes: Vec<DeviceClass>,
    pub prior_weight: f64,
}

impl SignatureEntry {
    pub fn validate(&self) -> Result<(), String> {
        if let AmplitudeBand::Fixed { lo_w, hi_w } = self.amplitude {
            if lo_w.is_nan() || hi_w.is_nan() || lo_w > hi_w {
                return Err(format!("{}: amplitude lo > hi", self.change_class));
            }
        }
        if let Some(DurationBand::Fixed { lo_s, hi_s }) = self.duration {
            if lo_s.is_nan() || hi_s.is_nan() || lo_s > hi_s {
                return Err(format!("{}: duration lo > hi", self.change_class));
            }
        }
        if (self.shape == FeatureKind::Step) != self.duration.is_none() {
            return Err(format!(
                "{}: a duration band is required exactly for transient shapes",
                self.change_class
            ));
        }
        if !(self.prior_weight.is_finite() && self.prior_weight > 0.0) {
            return Err(format!("{}: prior weight must be > 0", self.change_class));
        }
        Ok(())
    }

    pub fn applies_to(&self, class: DeviceClass) -> bool {
        self.applicable_classes.contains(&class)
    }
}

/// One entry of a device's event history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub at_ms: u64,
    pub class: ChangeClass,
    pub amplitude_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    signatures: Vec<SignatureEntry>,
    #[serde(default)]
    history: BTreeMap<String, Vec<HistoryEntry>>,
    #[serde(default)]
    version: u64,
}

impl KnowledgeBase {
    pub fn new(signatures: Vec<SignatureEntry>) -> Result<Self, String> {
        for s in &signatures {
            s.validate()?;
        }
        Ok(KnowledgeBase {
            signatures,
            history: BTreeMap::new(),
            version: 0,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        #[derive(Deserialize)]
        struct File {
            signatures: Vec<SignatureEntry>,
        }
        let f: File = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::new(f.signatures)
    }

    pub fn signatures(&self) -> &[SignatureEntry] {
        &self.signatures
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn history(&self, device_id: &str) -> &[HistoryEntry] {
        self.history
            .get(device_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn record(&mut self, device_id: &str, entry: HistoryEntry) {
        self.history
            .entry(device_id.to_string())
            .or_default()
            .push(entry);
        self.version += 1;
    }

    pub fn push_signature(&mut self, entry: SignatureEntry) -> Result<(), String> {
        entry.validate()?;
        self.signatures.push(entry);
        self.version += 1;
        Ok(())
    }
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        use ChangeClass::*;
        use DeviceClass::*;
        let bridges = vec![Switch, Router];
        let all = DeviceClass::ALL.to_vec();
        let fixed = |lo_w, hi_w| AmplitudeBand::Fixed { lo_w, hi_w };
        let model = AmplitudeBand::ModelDerived { fraction: 0.1 };
        let step = |class, amplitude, applicable: &Vec<DeviceClass>, prior| SignatureEntry {
            change_class: class,
            shape: FeatureKind::Step,
            amplitude,
            duration: None,
            applicable_classes: applicable.clone(),
            prior_weight: prior,
        };
        let burst = |class| SignatureEntry {
            change_class: class,
            shape: FeatureKind::BurstThenStep,
            amplitude: model,
            duration: Some(DurationBand::WakeBurst {
                min_s: 1.0,
                factor: 2.0,
            }),
            applicable_classes: all.clone(),
            prior_weight: 1.0,
        };
        let signatures = vec![
            step(PortDown, fixed(-0.4, -0.3), &bridges, 1.0),
            step(PortUp, fixed(0.3, 0.4), &bridges, 1.0),
            step(LinkRateDown, fixed(-0.4, -0.2), &bridges, 0.9),
            step(LinkRateUp, fixed(0.2, 0.4), &bridges, 0.9),
            step(LinkRateNoop, fixed(-0.05, 0.05), &bridges, 1.0),
            step(EeeLpiEnter, fixed(-0.4, -0.3), &bridges, 0.9),
            step(EeeLpiExit, fixed(0.3, 0.4), &bridges, 0.9),
            SignatureEntry {
                change_class: StpReevaluation,
                shape: FeatureKind::Spike,
                amplitude: fixed(0.0, 1.1),
                duration: Some(DurationBand::Fixed {
                    lo_s: 1.0,
                    hi_s: 5.0,
                }),
                applicable_classes: vec![Switch],
                prior_weight: 1.0,
            },
            step(Sleep, model, &all, 1.0),
            step(DeviceOff, model, &all, 1.0),
            burst(Wake),
            burst(DeviceOn),
        ];
        KnowledgeBase::new(signatures).expect("default signatures are valid")
    }
}
