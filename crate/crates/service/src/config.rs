use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sas_core::config::{Config, ConfigError};

/// Service settings. The `[loop]` table holds the adaptation loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Where the JSON Lines journals live; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    #[serde(rename = "loop")]
    pub core: Config,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:7878".into(),
            data_dir: None,
            core: Config::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(src: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(src)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        let cfg = ServiceConfig::from_toml(&src).map_err(|source| ConfigError::Toml { path: p, source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bind
            .parse::<SocketAddr>()
            .map_err(|e| ConfigError::Invalid(format!("bind address {:?}: {e}", self.bind)))?;
        self.core.validate()
    }
}
