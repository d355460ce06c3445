//! Runtime configuration, loadable from a TOML file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::MonitorConfig;
use crate::search::{DEFAULT_HORIZON, DEFAULT_MAX_HORIZON};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: String, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub monitor: MonitorConfig,
    pub horizon: u32,
    pub max_horizon: u32,
    /// Enact invisible controls that break no positive trace without asking.
    pub auto_enact: bool,
    /// Minutes before an unanswered intervention expires (7 days).
    pub expiry_minutes: u64,
    /// Assumption put in question by each anomaly kind.
    pub suspects: BTreeMap<String, String>,
    /// Name of the hypothetical device used when probing network assumptions.
    pub probe_device: String,
}

impl Default for Config {
    fn default() -> Self {
        let suspects = [
            ("frequent_new_devices", "password_strength"),
            ("latency_spike", "trusted_devices"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Config {
            monitor: MonitorConfig::default(),
            horizon: DEFAULT_HORIZON,
            max_horizon: DEFAULT_MAX_HORIZON,
            auto_enact: false,
            expiry_minutes: 7 * 24 * 60,
            suspects,
            probe_device: "newcomer".into(),
        }
    }
}

impl Config {
    pub fn from_toml(src: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(src)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        let cfg = Config::from_toml(&src).map_err(|source| ConfigError::Toml { path: p, source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon == 0 || self.horizon > self.max_horizon {
            return Err(ConfigError::Invalid(format!(
                "horizon {} must be between 1 and max_horizon {}",
                self.horizon, self.max_horizon
            )));
        }
        if self.monitor.theta == 0 || self.monitor.n_min == 0 {
            return Err(ConfigError::Invalid("theta and n_min must be positive".into()));
        }
        Ok(())
    }
}
