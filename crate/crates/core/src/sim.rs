//! Deterministic simulation of the tracker radio environment.
//!
//! Devices follow piecewise-linear waypoint paths. Every cadence tick each
//! online device measures one round trip per access point; the round-trip
//! time is produced by inverting the channel law `S = V·T + C` for the true
//! distance and adding Gaussian noise to the total time. The output is the
//! same wire traffic a real deployment would put on the air, plus fault
//! events.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ApLayout, Point2D};
use crate::protocol::{decode_signal, encode_signal, ApCode, DeviceId, TrackingSignal};

/// Class-1 adapter range.
pub const DEFAULT_RANGE_M: f64 = 100.0;
pub const DEFAULT_CADENCE_S: f64 = 5.0;
/// Smallest round-trip time the simulator reports.
pub const MIN_RTT_S: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse script: {0}")]
    Parse(String),
    #[error("invalid script: {0}")]
    Invalid(String),
}

/// Ground-truth channel the simulator draws round-trip times from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTruth {
    pub speed: f64,
    pub error: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ChannelTruth {
    pub fn validate(&self) -> Result<(), ScriptError> {
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(ScriptError::Invalid(format!(
                "channel speed must be > 0, got {}",
                self.speed
            )));
        }
        if !self.error.is_finite() {
            return Err(ScriptError::Invalid("channel error must be finite".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(ScriptError::Invalid(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Seeded noise source. Draw `k` of a given seed is the same on every
/// platform, so a run is reproducible from the seed alone.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    draws: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn gaussian(&mut self, sigma: f64) -> f64 {
        self.draws += 1;
        Normal::new(0.0, sigma)
            .expect("sigma validated")
            .sample(&mut self.rng)
    }
}

/// Round-trip time a device at distance `s` would measure:
/// `2·(s − C)/V + ε`, floored at [`MIN_RTT_S`].
pub fn rtt_for_distance(truth: &ChannelTruth, s: f64, noise: &mut NoiseSource) -> f64 {
    let mut t = 2.0 * (s - truth.error) / truth.speed;
    if truth.noise_sigma > 0.0 {
        t += noise.gaussian(truth.noise_sigma);
    }
    t.max(MIN_RTT_S)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceScript {
    pub id: DeviceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub waypoints: Vec<Waypoint>,
}

impl DeviceScript {
    /// Position at time `t`; clamped to the first/last waypoint outside
    /// the scripted span.
    pub fn position_at(&self, t: f64) -> Point2D {
        let wps = &self.waypoints;
        let first = wps[0];
        if t <= first.t {
            return Point2D::new(first.x, first.y);
        }
        for pair in wps.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if t <= b.t {
                let w = (t - a.t) / (b.t - a.t);
                return Point2D::new(a.x + w * (b.x - a.x), a.y + w * (b.y - a.y));
            }
        }
        let last = wps[wps.len() - 1];
        Point2D::new(last.x, last.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    ApDisconnect { ap: ApCode, at: f64 },
    ApReconnect { ap: ApCode, at: f64 },
    DeviceOffline { device: DeviceId, at: f64 },
}

impl Fault {
    pub fn at(&self) -> f64 {
        match self {
            Fault::ApDisconnect { at, .. }
            | Fault::ApReconnect { at, .. }
            | Fault::DeviceOffline { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScript {
    /// Last tick time, seconds. Ticks run at `k·cadence` for `k·cadence ≤ duration`.
    pub duration: f64,
    pub devices: Vec<DeviceScript>,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

impl SimScript {
    pub fn validate(&self) -> Result<(), ScriptError> {
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(ScriptError::Invalid(format!(
                "duration must be >= 0, got {}",
                self.duration
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for dev in &self.devices {
            if !seen.insert(&dev.id) {
                return Err(ScriptError::Invalid(format!(
                    "device {} listed twice",
                    dev.id
                )));
            }
            if dev.waypoints.is_empty() {
                return Err(ScriptError::Invalid(format!(
                    "device {} has no waypoints",
                    dev.id
                )));
            }
            if dev
                .waypoints
                .iter()
                .any(|w| !(w.t.is_finite() && w.x.is_finite() && w.y.is_finite()))
            {
                return Err(ScriptError::Invalid(format!(
                    "device {} has a non-finite waypoint",
                    dev.id
                )));
            }
            if dev.waypoints.windows(2).any(|w| w[1].t <= w[0].t) {
                return Err(ScriptError::Invalid(format!(
                    "device {} waypoint times must strictly increase",
                    dev.id
                )));
            }
        }
        for fault in &self.faults {
            let at = fault.at();
            if !(at.is_finite() && (0.0..=self.duration).contains(&at)) {
                return Err(ScriptError::Invalid(format!(
                    "fault time {at} outside [0, {}]",
                    self.duration
                )));
            }
            if let Fault::DeviceOffline { device, .. } = fault {
                if !seen.contains(device) {
                    return Err(ScriptError::Invalid(format!(
                        "fault names unknown device {device}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Adds a fault. Faults with equal times apply in insertion order.
pub fn inject_fault(mut script: SimScript, fault: Fault) -> SimScript {
    script.faults.push(fault);
    script
}

/// Everything a simulation run needs, as stored in a script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub layout: ApLayout,
    pub channel: ChannelTruth,
    #[serde(default = "default_cadence")]
    pub cadence: f64,
    #[serde(default = "default_range")]
    pub range_m: f64,
    #[serde(flatten)]
    pub script: SimScript,
}

fn default_cadence() -> f64 {
    DEFAULT_CADENCE_S
}

fn default_range() -> f64 {
    DEFAULT_RANGE_M
}

impl ScriptFile {
    /// TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        Ok(file)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile =
            toml::from_str(text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        self.script.validate()?;
        self.channel.validate()?;
        if !(self.cadence.is_finite() && self.cadence > 0.0) {
            return Err(ScriptError::Invalid(format!(
                "cadence must be > 0, got {}",
                self.cadence
            )));
        }
        if !(self.range_m > 0.0) {
            return Err(ScriptError::Invalid(format!(
                "range_m must be > 0, got {}",
                self.range_m
            )));
        }
        for fault in &self.script.faults {
            if let Fault::ApDisconnect { ap, .. } | Fault::ApReconnect { ap, .. } = fault {
                if self.layout.position_of(ap).is_none() {
                    return Err(ScriptError::Invalid(format!(
                        "fault names unknown access point {ap}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> SimConfig {
        SimConfig {
            cadence: self.cadence,
            range_m: self.range_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub cadence: f64,
    pub range_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cadence: DEFAULT_CADENCE_S,
            range_m: DEFAULT_RANGE_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEventKind {
    SignalEmitted(TrackingSignal),
    ApDisconnected(ApCode),
    ApReconnected(ApCode),
    DeviceOffline(DeviceId),
    OutOfRange { device: DeviceId, ap: ApCode },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub at: f64,
    pub kind: SimEventKind,
}

/// Line-delimited JSON form of a [`SimEvent`]. Signals carry their wire
/// line verbatim (without the trailing newline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventRecord {
    SignalEmitted {
        at: f64,
        signal: String,
    },
    ApDisconnected {
        at: f64,
        ap: ApCode,
    },
    ApReconnected {
        at: f64,
        ap: ApCode,
    },
    DeviceOffline {
        at: f64,
        device: DeviceId,
    },
    OutOfRange {
        at: f64,
        device: DeviceId,
        ap: ApCode,
    },
}

impl EventRecord {
    pub fn at(&self) -> f64 {
        match self {
            EventRecord::SignalEmitted { at, .. }
            | EventRecord::ApDisconnected { at, .. }
            | EventRecord::ApReconnected { at, .. }
            | EventRecord::DeviceOffline { at, .. }
            | EventRecord::OutOfRange { at, .. } => *at,
        }
    }
}

impl From<&SimEvent> for EventRecord {
    fn from(ev: &SimEvent) -> Self {
        let at = ev.at;
        match &ev.kind {
            SimEventKind::SignalEmitted(sig) => EventRecord::SignalEmitted {
                at,
                signal: encode_signal(sig).trim_end().to_owned(),
            },
            SimEventKind::ApDisconnected(ap) => EventRecord::ApDisconnected { at, ap: ap.clone() },
            SimEventKind::ApReconnected(ap) => EventRecord::ApReconnected { at, ap: ap.clone() },
            SimEventKind::DeviceOffline(device) => EventRecord::DeviceOffline {
                at,
                device: device.clone(),
            },
            SimEventKind::OutOfRange { device, ap } => EventRecord::OutOfRange {
                at,
                device: device.clone(),
                ap: ap.clone(),
            },
        }
    }
}

impl TryFrom<EventRecord> for SimEvent {
    type Error = crate::protocol::ParseError;
    fn try_from(rec: EventRecord) -> Result<Self, Self::Error> {
        let at = rec.at();
        let kind = match rec {
            EventRecord::SignalEmitted { signal, .. } => {
                SimEventKind::SignalEmitted(decode_signal(&signal)?)
            }
            EventRecord::ApDisconnected { ap, .. } => SimEventKind::ApDisconnected(ap),
            EventRecord::ApReconnected { ap, .. } => SimEventKind::ApReconnected(ap),
            EventRecord::DeviceOffline { device, .. } => SimEventKind::DeviceOffline(device),
            EventRecord::OutOfRange { device, ap, .. } => SimEventKind::OutOfRange { device, ap },
        };
        Ok(SimEvent { at, kind })
    }
}

/// One JSON object per line, newline-terminated.
pub fn write_events(events: &[SimEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(&EventRecord::from(ev)).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_events(text: &str) -> Result<Vec<EventRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Runs the script and returns its events in time order.
///
/// Per tick: pending faults (insertion order), then each online device in
/// script order. A device with any AP leg beyond range, or with any AP
/// disconnected, sends no signal that tick; the signal needs all three times.
pub fn run_simulation(
    script: &SimScript,
    layout: &ApLayout,
    truth: &ChannelTruth,
    config: SimConfig,
) -> Result<Vec<SimEvent>, ScriptError> {
    script.validate()?;
    truth.validate()?;
    if !(config.cadence.is_finite() && config.cadence > 0.0) {
        return Err(ScriptError::Invalid(format!(
            "cadence must be > 0, got {}",
            config.cadence
        )));
    }

    let mut noise = NoiseSource::new(truth.seed);
    let mut events = Vec::new();
    let mut ap_down = [false; 3];
    let mut offline = vec![false; script.devices.len()];
    let mut next_fault = 0;

    // faults sorted by time, stable so ties keep insertion order
    let mut faults: Vec<&Fault> = script.faults.iter().collect();
    faults.sort_by(|a, b| a.at().total_cmp(&b.at()));

    let ticks = (script.duration / config.cadence + 1e-9).floor() as u64;
    for k in 0..=ticks {
        let now = k as f64 * config.cadence;

        while next_fault < faults.len() && faults[next_fault].at() <= now {
            let fault = faults[next_fault];
            next_fault += 1;
            match fault {
                Fault::ApDisconnect { ap, .. } => {
                    let i = layout.codes().iter().position(|c| c == ap).ok_or_else(|| {
                        ScriptError::Invalid(format!("fault names unknown access point {ap}"))
                    })?;
                    if !ap_down[i] {
                        ap_down[i] = true;
                        events.push(SimEvent {
                            at: now,
                            kind: SimEventKind::ApDisconnected(ap.clone()),
                        });
                    }
                }
                Fault::ApReconnect { ap, .. } => {
                    let i = layout.codes().iter().position(|c| c == ap).ok_or_else(|| {
                        ScriptError::Invalid(format!("fault names unknown access point {ap}"))
                    })?;
                    if ap_down[i] {
                        ap_down[i] = false;
                        events.push(SimEvent {
                            at: now,
                            kind: SimEventKind::ApReconnected(ap.clone()),
                        });
                    }
                }
                Fault::DeviceOffline { device, .. } => {
                    let i = script
                        .devices
                        .iter()
                        .position(|d| &d.id == device)
                        .expect("validated");
                    if !offline[i] {
                        offline[i] = true;
                        events.push(SimEvent {
                            at: now,
                            kind: SimEventKind::DeviceOffline(device.clone()),
                        });
                    }
                }
            }
        }

        for (dev, _) in script
            .devices
            .iter()
            .zip(&offline)
            .filter(|(_, off)| !**off)
        {
            if ap_down.iter().any(|d| *d) {
                continue;
            }
            let pos = dev.position_at(now);
            let dists = layout.distances_to(&pos).as_array();
            let mut blocked = false;
            for (code, s) in layout.codes().iter().zip(dists) {
                if s > config.range_m {
                    blocked = true;
                    events.push(SimEvent {
                        at: now,
                        kind: SimEventKind::OutOfRange {
                            device: dev.id.clone(),
                            ap: code.clone(),
                        },
                    });
                }
            }
            if blocked {
                continue;
            }
            let times = dists.map(|s| rtt_for_distance(truth, s, &mut noise));
            let sig = TrackingSignal::new(dev.id.clone(), times).expect("rtt floored above zero");
            events.push(SimEvent {
                at: now,
                kind: SimEventKind::SignalEmitted(sig),
            });
        }
    }
    Ok(events)
}

/// Runs a loaded script file.
pub fn run_script_file(file: &ScriptFile) -> Result<Vec<SimEvent>, ScriptError> {
    run_simulation(&file.script, &file.layout, &file.channel, file.config())
}
