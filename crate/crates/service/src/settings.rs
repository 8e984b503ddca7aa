//! Shared `--config FILE` contents and environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use exo_core::control::LoopConfig;
use exo_core::policy::PolicyConfig;

use crate::error::{Result, ServiceError};

pub const ENV_PORT: &str = "EXO_PORT";
pub const ENV_DATA_DIR: &str = "EXO_DATA_DIR";
pub const DEFAULT_PORT: u16 = 8765;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub port: u16,
    pub data_dir: PathBuf,
    pub state_decimation: u32,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self { port: DEFAULT_PORT, data_dir: PathBuf::from("data"), state_decimation: 1 }
    }
}

/// TOML file with optional `[loop]`, `[policy]` and `[service]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    #[serde(rename = "loop")]
    pub control: LoopConfig,
    pub policy: PolicyConfig,
    pub service: ServiceSettings,
    /// Robot chain file; the shipped chains when absent.
    pub chains: Option<PathBuf>,
    /// Task constraint file: a JSON list of constraints, looked up by id.
    pub constraints: Option<PathBuf>,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let settings = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        settings.control.validate()?;
        Ok(settings)
    }

    /// Applies `EXO_PORT` and `EXO_DATA_DIR` as read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(port) = lookup(ENV_PORT) {
            self.service.port =
                port.trim().parse().map_err(|_| ServiceError::Config(format!("{ENV_PORT}='{port}' is not a port")))?;
        }
        if let Some(dir) = lookup(ENV_DATA_DIR) {
            self.service.data_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    pub fn from_process(path: Option<&Path>) -> Result<Self> {
        let mut s = Self::load(path)?;
        s.apply_env(|k| std::env::var(k).ok())?;
        Ok(s)
    }
}
