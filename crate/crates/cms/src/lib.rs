//! Central monitoring service.
//!
//! [`Cms`] owns the monitoring engine behind a single serialized command
//! path and publishes every engine event on an append-only, totally ordered
//! stream. [`http`] exposes it as an HTTP+JSON API with a line-delimited JSON
//! event stream.

pub mod config;
pub mod http;
pub mod service;

pub use config::{ConfigError, ServiceConfig};
pub use service::{
    CalibrationOutcome, Cms, CmsError, DeviceView, FaultReport, LayoutOutcome, LoggedEvent, Marker,
    Phase, Snapshot,
};
