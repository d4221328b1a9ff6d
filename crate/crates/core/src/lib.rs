//! Core of the bluetrack indoor tracker.
//!
//! A tracked device measures round-trip times to three access points (APs).
//! The monitoring side converts those times into distances with a fitted
//! linear channel model ([`calibration`]), turns the three distances into an
//! XY coordinate ([`geometry`]) and decides whether the device has moved
//! ([`monitor`]). [`protocol`] holds the wire formats and [`sim`] a
//! deterministic radio simulator that produces the same wire traffic.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod geometry;
pub mod monitor;
pub mod protocol;
pub mod sim;

pub use calibration::{
    distance_from_time, fit, half_time, CalibrationError, CalibrationSet, ChannelParams,
    RangeEstimate, RttSample,
};
pub use geometry::{
    build_linear_system, check_geometry, solve_position, trilaterate, ApLayout, DistanceTriple,
    GeometryError, GeometryVerdict, LinearSystem2, Point2D,
};
pub use monitor::{
    AlarmState, DeviceTrack, LinkState, MonitorConfig, MonitorEngine, MonitorError, MonitorEvent,
    ShutdownCheck,
};
pub use protocol::{ApCode, DeviceId, EchoFrame, FriendlyName, ParseError, TrackingSignal};
