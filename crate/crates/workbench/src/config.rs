//! Service configuration, read from TOML.
//!
//! The CLI builds a config from its flags and then lays the file on top, so a
//! key set in the file wins over the matching flag.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WorkbenchError};

/// Environment variable naming the compute device.
pub const DEVICE_ENV: &str = "NEURODEBUG_DEVICE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkbenchConfig {
    /// Directory holding one subdirectory per run.
    pub store: PathBuf,
    pub port: u16,
    pub device: String,
    /// Built single-page app, served at `/` when set.
    pub ui_dir: Option<PathBuf>,
    /// Split whose class means serve as representatives for core relevance.
    pub representative_split: String,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            store: PathBuf::from("neurodebug-runs"),
            port: 8080,
            device: "cpu".into(),
            ui_dir: None,
            representative_split: "val".into(),
        }
    }
}

impl WorkbenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))
    }

    /// Overlay the keys present in `text` onto `self`.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(self).map_err(|e| WorkbenchError::Config(e.to_string()))?;
        merge(&mut base, file);
        base.try_into().map_err(|e: toml::de::Error| WorkbenchError::Config(e.to_string()))
    }

    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorkbenchError::Config(format!("{}: {e}", path.display())))?;
        self.overlay_toml(&text)
    }

    /// Apply `NEURODEBUG_DEVICE` and check the device is one we can run on.
    pub fn resolve_device(mut self) -> Result<Self> {
        if let Ok(d) = std::env::var(DEVICE_ENV) {
            self.device = d;
        }
        if self.device != "cpu" {
            return Err(WorkbenchError::Config(format!(
                "device {:?} is not available; only \"cpu\" is supported",
                self.device
            )));
        }
        Ok(self)
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
