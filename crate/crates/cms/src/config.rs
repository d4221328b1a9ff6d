//! Service configuration file (TOML).
//!
//! ```toml
//! calibration_csv = "calibration.csv"   # optional, distance_m,total_time_s
//!
//! [monitor]
//! move_threshold = 1.0
//! grid_spacing = 4.0
//! cadence = 5.0
//!
//! [[layout]]
//! code = "aaa"
//! x = 0.0
//! y = 0.0
//! # ... three entries in AP1, AP2, AP3 order
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use bluetrack_core::calibration::{fit, CalibrationError, CalibrationSet};
use bluetrack_core::geometry::ApLayout;
use bluetrack_core::monitor::MonitorConfig;

use crate::service::{Cms, CmsError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Service(#[from] CmsError),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default)]
    pub monitor: MonitorConfig,
    pub calibration_csv: Option<PathBuf>,
    pub layout: Option<ApLayout>,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ServiceConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.monitor
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    /// Builds a service and runs whatever initialization the file provides.
    /// The CSV path is resolved against the current directory.
    pub fn build(&self) -> Result<Cms, ConfigError> {
        let cms = Cms::new(self.monitor)?;
        if let Some(path) = &self.calibration_csv {
            let file = std::fs::File::open(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let set = CalibrationSet::read_csv(file)?;
            cms.apply_params(fit(&set)?);
        }
        if let Some(layout) = &self.layout {
            if let Some(warning) = cms.set_layout(layout.clone()).warning {
                tracing::warn!("{warning}");
            }
        }
        Ok(cms)
    }
}
