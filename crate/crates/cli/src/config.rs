//! Service configuration: defaults, then a TOML file, then `WATTSENTINEL_*`
//! environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wattsentinel_core::fdi::{FdiConfig, KnowledgeBase, PortRef};

pub const ENV_PREFIX: &str = "WATTSENTINEL_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
}

/// Where the monitor takes its probes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Simulator,
    Trace,
    Hardware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub sample_period_ms: u64,
    pub theta_w: f64,
    pub window_samples: usize,
    pub spike_max_duration_s: f64,
    pub noise_sigma_w: f64,
    /// Unset means exact for simulated and replayed data, 0.5 W for hardware.
    pub aggregate_tolerance_w: Option<f64>,
    /// `device:port` entries whose loss is a misconfiguration.
    pub critical_ports: Vec<PortRef>,
    pub kb_path: Option<PathBuf>,
    pub topology_path: PathBuf,
    pub listen_address: String,
    /// JSON-lines history file. In memory when unset.
    pub store_path: Option<PathBuf>,
    pub source: SourceKind,
    /// Recorded probes served when `source = "trace"`.
    pub trace_path: Option<PathBuf>,
    /// Scenario played by the live simulator, relative to its start.
    pub scenario_path: Option<PathBuf>,
    pub seed: u64,
    /// Simulated seconds per wall-clock second in `monitor`.
    pub time_scale: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            sample_period_ms: 1000,
            theta_w: 0.1,
            window_samples: 10,
            spike_max_duration_s: 5.0,
            noise_sigma_w: 0.02,
            aggregate_tolerance_w: None,
            critical_ports: Vec::new(),
            kb_path: None,
            topology_path: PathBuf::from("scenarios/topology.toml"),
            listen_address: "127.0.0.1:8080".into(),
            store_path: None,
            source: SourceKind::Simulator,
            trace_path: None,
            scenario_path: None,
            seed: 0,
            time_scale: 1.0,
        }
    }
}

impl AppConfig {
    /// Reads `path` (if given) and applies environment overrides from `env`.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_env(&mut table, env)?;
        let cfg: AppConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads from `path` and the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sample_period_ms == 0 {
            return Err(ConfigError::Invalid("sample_period_ms must be > 0".into()));
        }
        if !(self.noise_sigma_w.is_finite() && self.noise_sigma_w >= 0.0) {
            return Err(ConfigError::Invalid("noise_sigma_w must be >= 0".into()));
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(ConfigError::Invalid("time_scale must be > 0".into()));
        }
        if self.source == SourceKind::Trace && self.trace_path.is_none() {
            return Err(ConfigError::Invalid(
                "source = \"trace\" needs trace_path".into(),
            ));
        }
        self.fdi().validate().map_err(ConfigError::Invalid)
    }

    pub fn tolerance_w(&self) -> f64 {
        self.aggregate_tolerance_w.unwrap_or(match self.source {
            SourceKind::Hardware => 0.5,
            _ => 0.0,
        })
    }

    pub fn fdi(&self) -> FdiConfig {
        FdiConfig {
            theta_w: self.theta_w,
            window_samples: self.window_samples,
            spike_max_duration_s: self.spike_max_duration_s,
            aggregate_tolerance_w: self.tolerance_w(),
            critical_ports: self.critical_ports.clone(),
            ..FdiConfig::default()
        }
    }

    pub fn knowledge_base(&self) -> Result<KnowledgeBase, ConfigError> {
        match &self.kb_path {
            None => Ok(KnowledgeBase::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                KnowledgeBase::from_toml(&text)
                    .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// Overlays `WATTSENTINEL_<KEY>` variables onto `table`. Values are read as
/// TOML literals when they parse as one, otherwise as plain strings; list
/// keys take comma-separated items. Variables naming no config key are
/// ignored.
fn apply_env<I>(table: &mut toml::Table, env: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let known: BTreeMap<String, ()> = known_keys().into_iter().map(|k| (k, ())).collect();
    for (var, raw) in env {
        let Some(rest) = var.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let key = rest.to_ascii_lowercase();
        if !known.contains_key(&key) {
            continue;
        }
        let value = if key == "critical_ports" {
            toml::Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| toml::Value::String(s.to_string()))
                    .collect(),
            )
        } else {
            literal(&raw).unwrap_or_else(|| toml::Value::String(raw.clone()))
        };
        if value.as_str().is_some_and(str::is_empty) {
            return Err(ConfigError::Env {
                var,
                message: "empty value".into(),
            });
        }
        table.insert(key, value);
    }
    Ok(())
}

fn literal(raw: &str) -> Option<toml::Value> {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
}

fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = [
        "aggregate_tolerance_w",
        "kb_path",
        "store_path",
        "trace_path",
        "scenario_path",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    // Optional keys are absent from the serialized defaults.
    if let Ok(toml::Value::Table(t)) = toml::Value::try_from(AppConfig::default()) {
        keys.extend(t.keys().cloned());
    }
    keys
}
