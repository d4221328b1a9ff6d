//! Movement monitoring: per-device tracks, the initial-location rule, the
//! alarm lifecycle and link error handling.
//!
//! Every command first decides which [`MonitorEvent`]s it produces and then
//! folds them into the engine with [`MonitorEngine::apply`]. State changes
//! only through `apply`, so replaying an engine's event log into a fresh
//! engine rebuilds the same state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{distance_from_time, ChannelParams};
use crate::geometry::{trilaterate, ApLayout, DistanceTriple, Point2D};
use crate::protocol::{ApCode, DeviceId, FriendlyName, TrackingSignal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Smallest per-axis displacement (m) that counts as movement.
    pub move_threshold: f64,
    /// Spacing of surveyed floor points, m. Advisory; 3 to 5 m works best.
    pub grid_spacing: f64,
    /// Expected signal period, s.
    pub cadence: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            move_threshold: 1.0,
            grid_spacing: 4.0,
            cadence: 5.0,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(self.move_threshold.is_finite() && self.move_threshold > 0.0) {
            return Err(MonitorError::InvalidConfig(format!(
                "move_threshold must be > 0, got {}",
                self.move_threshold
            )));
        }
        if !(self.cadence.is_finite() && self.cadence > 0.0) {
            return Err(MonitorError::InvalidConfig(format!(
                "cadence must be > 0, got {}",
                self.cadence
            )));
        }
        if !(self.grid_spacing.is_finite() && self.grid_spacing > 0.0) {
            return Err(MonitorError::InvalidConfig(format!(
                "grid_spacing must be > 0, got {}",
                self.grid_spacing
            )));
        }
        Ok(())
    }

    /// True when `to` differs from `from` by at least the threshold on
    /// either axis. Smaller changes are ignored.
    pub fn is_movement(&self, from: &Point2D, to: &Point2D) -> bool {
        (to.x - from.x).abs() >= self.move_threshold || (to.y - from.y).abs() >= self.move_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error(
        "system not initialized: signal speed, transmission error and AP coordinates are required"
    )]
    NotInitialized,
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("unknown access point {0}")]
    UnknownAp(ApCode),
    #[error("device {0} has no active alarm")]
    NoActiveAlarm(DeviceId),
    #[error("invalid monitor config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum AlarmState {
    None,
    Active { since: f64, at: Point2D },
}

impl AlarmState {
    pub fn is_active(&self) -> bool {
        matches!(self, AlarmState::Active { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum LinkState {
    Connected,
    Disconnected,
    Error { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrack {
    pub id: DeviceId,
    pub friendly: FriendlyName,
    pub initial: Option<Point2D>,
    pub last: Option<Point2D>,
    /// Position movement is measured against: the initial location, then
    /// the location current at each acknowledgment.
    pub reference: Option<Point2D>,
    pub alarm: AlarmState,
    pub link: LinkState,
    pub last_signal_at: Option<f64>,
}

impl DeviceTrack {
    fn new(id: DeviceId, name: String, link: LinkState) -> Self {
        DeviceTrack {
            friendly: FriendlyName::new(name, id.clone()),
            id,
            initial: None,
            last: None,
            reference: None,
            alarm: AlarmState::None,
            link,
            last_signal_at: None,
        }
    }

    fn reset_epoch(&mut self) {
        self.initial = None;
        self.last = None;
        self.reference = None;
        self.alarm = AlarmState::None;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MonitorEvent {
    CalibrationApplied {
        params: ChannelParams,
    },
    LayoutConfigured {
        layout: ApLayout,
    },
    DeviceRegistered {
        device: DeviceId,
        name: String,
        at: f64,
    },
    PositionUpdated {
        device: DeviceId,
        position: Point2D,
        at: f64,
        initial: bool,
        clamped: bool,
    },
    AlarmRaised {
        device: DeviceId,
        position: Point2D,
        at: f64,
    },
    AlarmCleared {
        device: DeviceId,
        reference: Point2D,
    },
    TrackingError {
        device: DeviceId,
        at: f64,
        reason: String,
    },
    ApError {
        ap: ApCode,
        at: f64,
    },
    ApRestored {
        ap: ApCode,
        at: f64,
    },
    DeviceDisconnected {
        device: DeviceId,
        at: f64,
    },
    DeviceRenamed {
        device: DeviceId,
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ShutdownCheck {
    Allowed,
    Blocked { connected: Vec<DeviceId> },
}

/// Point-in-time copy of the engine state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub params: Option<ChannelParams>,
    pub layout: Option<ApLayout>,
    pub devices: Vec<DeviceTrack>,
    pub disconnected_aps: Vec<ApCode>,
}

#[derive(Debug, Clone)]
pub struct MonitorEngine {
    config: MonitorConfig,
    params: Option<ChannelParams>,
    layout: Option<ApLayout>,
    tracks: BTreeMap<DeviceId, DeviceTrack>,
    down_aps: BTreeSet<ApCode>,
}

impl MonitorEngine {
    pub fn new(config: MonitorConfig) -> Result<Self, MonitorError> {
        config.validate()?;
        Ok(MonitorEngine {
            config,
            params: None,
            layout: None,
            tracks: BTreeMap::new(),
            down_aps: BTreeSet::new(),
        })
    }

    /// Rebuilds an engine from an event log.
    pub fn replay<'a>(
        config: MonitorConfig,
        events: impl IntoIterator<Item = &'a MonitorEvent>,
    ) -> Result<Self, MonitorError> {
        let mut engine = MonitorEngine::new(config)?;
        for ev in events {
            engine.apply(ev);
        }
        Ok(engine)
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn params(&self) -> Option<&ChannelParams> {
        self.params.as_ref()
    }

    pub fn layout(&self) -> Option<&ApLayout> {
        self.layout.as_ref()
    }

    pub fn is_initialized(&self) -> bool {
        self.params.is_some() && self.layout.is_some()
    }

    pub fn track(&self, id: &DeviceId) -> Option<&DeviceTrack> {
        self.tracks.get(id)
    }

    pub fn tracks(&self) -> impl Iterator<Item = &DeviceTrack> {
        self.tracks.values()
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            params: self.params,
            layout: self.layout.clone(),
            devices: self.tracks.values().cloned().collect(),
            disconnected_aps: self.down_aps.iter().cloned().collect(),
        }
    }

    fn commit(&mut self, events: Vec<MonitorEvent>) -> Vec<MonitorEvent> {
        for ev in &events {
            self.apply(ev);
        }
        events
    }

    /// New channel parameters. Starts a new epoch: every track forgets its
    /// initial location and alarm.
    pub fn set_params(&mut self, params: ChannelParams) -> Vec<MonitorEvent> {
        self.commit(vec![MonitorEvent::CalibrationApplied { params }])
    }

    /// New AP coordinates. Starts a new epoch like [`Self::set_params`].
    pub fn set_layout(&mut self, layout: ApLayout) -> Vec<MonitorEvent> {
        self.commit(vec![MonitorEvent::LayoutConfigured { layout }])
    }

    /// Converts the three round-trip times to a position and runs the
    /// movement rule on it.
    pub fn process_signal(
        &mut self,
        sig: &TrackingSignal,
        at: f64,
    ) -> Result<Vec<MonitorEvent>, MonitorError> {
        let (Some(params), Some(layout)) = (self.params.as_ref(), self.layout.as_ref()) else {
            return Err(MonitorError::NotInitialized);
        };
        let ranges = sig.times.map(|t| distance_from_time(params, t));
        let clamped = ranges.iter().any(|r| r.clamped);
        let fix = DistanceTriple::new(ranges[0].meters, ranges[1].meters, ranges[2].meters)
            .and_then(|d| trilaterate(layout, &d));

        let mut events = self.registration(&sig.source, at);
        if !self.down_aps.is_empty() {
            // partial data while an AP is out; never produce a position from it
            return Ok(self.commit(events));
        }
        match fix {
            Ok(position) => events.extend(self.decide_position(&sig.source, position, at, clamped)),
            Err(e) => events.push(MonitorEvent::TrackingError {
                device: sig.source.clone(),
                at,
                reason: e.to_string(),
            }),
        }
        Ok(self.commit(events))
    }

    /// Runs the movement rule on an already computed position.
    pub fn record_position(
        &mut self,
        device: &DeviceId,
        position: Point2D,
        at: f64,
    ) -> Vec<MonitorEvent> {
        let mut events = self.registration(device, at);
        if self.down_aps.is_empty() {
            events.extend(self.decide_position(device, position, at, false));
        }
        self.commit(events)
    }

    fn registration(&self, device: &DeviceId, at: f64) -> Vec<MonitorEvent> {
        if self.tracks.contains_key(device) {
            vec![]
        } else {
            vec![MonitorEvent::DeviceRegistered {
                device: device.clone(),
                name: device.to_string(),
                at,
            }]
        }
    }

    fn decide_position(
        &self,
        device: &DeviceId,
        position: Point2D,
        at: f64,
        clamped: bool,
    ) -> Vec<MonitorEvent> {
        let track = self.tracks.get(device);
        let reference = track.and_then(|t| t.reference);
        let latched = track.is_some_and(|t| t.alarm.is_active());
        let update = MonitorEvent::PositionUpdated {
            device: device.clone(),
            position,
            at,
            initial: reference.is_none(),
            clamped,
        };
        match reference {
            Some(r) if !latched && self.config.is_movement(&r, &position) => {
                vec![
                    update,
                    MonitorEvent::AlarmRaised {
                        device: device.clone(),
                        position,
                        at,
                    },
                ]
            }
            _ => vec![update],
        }
    }

    /// Operator acknowledgment: silences the alarm and rebases the movement
    /// reference on the current location.
    pub fn acknowledge(&mut self, device: &DeviceId) -> Result<Vec<MonitorEvent>, MonitorError> {
        let track = self
            .tracks
            .get(device)
            .ok_or_else(|| MonitorError::UnknownDevice(device.clone()))?;
        if !track.alarm.is_active() {
            return Err(MonitorError::NoActiveAlarm(device.clone()));
        }
        let reference = track
            .last
            .or(track.reference)
            .expect("an alarm implies a position");
        Ok(self.commit(vec![MonitorEvent::AlarmCleared {
            device: device.clone(),
            reference,
        }]))
    }

    pub fn handle_ap_disconnect(
        &mut self,
        ap: &ApCode,
        at: f64,
    ) -> Result<Vec<MonitorEvent>, MonitorError> {
        self.known_ap(ap)?;
        if self.down_aps.contains(ap) {
            return Ok(vec![]);
        }
        Ok(self.commit(vec![MonitorEvent::ApError { ap: ap.clone(), at }]))
    }

    pub fn handle_ap_reconnect(
        &mut self,
        ap: &ApCode,
        at: f64,
    ) -> Result<Vec<MonitorEvent>, MonitorError> {
        self.known_ap(ap)?;
        if !self.down_aps.contains(ap) {
            return Ok(vec![]);
        }
        Ok(self.commit(vec![MonitorEvent::ApRestored { ap: ap.clone(), at }]))
    }

    fn known_ap(&self, ap: &ApCode) -> Result<(), MonitorError> {
        match &self.layout {
            Some(layout) if layout.codes().contains(ap) => Ok(()),
            _ => Err(MonitorError::UnknownAp(ap.clone())),
        }
    }

    pub fn handle_device_offline(
        &mut self,
        device: &DeviceId,
        at: f64,
    ) -> Result<Vec<MonitorEvent>, MonitorError> {
        let track = self
            .tracks
            .get(device)
            .ok_or_else(|| MonitorError::UnknownDevice(device.clone()))?;
        if track.link == LinkState::Disconnected {
            return Ok(vec![]);
        }
        Ok(self.commit(vec![MonitorEvent::DeviceDisconnected {
            device: device.clone(),
            at,
        }]))
    }

    pub fn rename(
        &mut self,
        device: &DeviceId,
        name: &str,
    ) -> Result<Vec<MonitorEvent>, MonitorError> {
        if !self.tracks.contains_key(device) {
            return Err(MonitorError::UnknownDevice(device.clone()));
        }
        Ok(self.commit(vec![MonitorEvent::DeviceRenamed {
            device: device.clone(),
            name: name.to_owned(),
        }]))
    }

    /// Shutdown is allowed once no device holds a live connection.
    pub fn can_shutdown(&self) -> ShutdownCheck {
        let connected: Vec<DeviceId> = self
            .tracks
            .values()
            .filter(|t| t.link == LinkState::Connected)
            .map(|t| t.id.clone())
            .collect();
        if connected.is_empty() {
            ShutdownCheck::Allowed
        } else {
            ShutdownCheck::Blocked { connected }
        }
    }

    fn live_link(&self) -> LinkState {
        match self.down_aps.first() {
            Some(ap) => LinkState::Error {
                reason: format!("access point {ap} disconnected"),
            },
            None => LinkState::Connected,
        }
    }

    pub fn apply(&mut self, event: &MonitorEvent) {
        match event {
            MonitorEvent::CalibrationApplied { params } => {
                self.params = Some(*params);
                self.tracks.values_mut().for_each(DeviceTrack::reset_epoch);
            }
            MonitorEvent::LayoutConfigured { layout } => {
                self.layout = Some(layout.clone());
                self.down_aps.clear();
                for track in self.tracks.values_mut() {
                    track.reset_epoch();
                    if matches!(track.link, LinkState::Error { .. }) {
                        track.link = LinkState::Connected;
                    }
                }
            }
            MonitorEvent::DeviceRegistered { device, name, .. } => {
                let link = self.live_link();
                self.tracks.insert(
                    device.clone(),
                    DeviceTrack::new(device.clone(), name.clone(), link),
                );
            }
            MonitorEvent::PositionUpdated {
                device,
                position,
                at,
                initial,
                ..
            } => {
                let link = self.live_link();
                if let Some(t) = self.tracks.get_mut(device) {
                    if *initial {
                        t.initial = Some(*position);
                        t.reference = Some(*position);
                    }
                    t.last = Some(*position);
                    t.last_signal_at = Some(*at);
                    t.link = link;
                }
            }
            MonitorEvent::AlarmRaised {
                device,
                position,
                at,
            } => {
                if let Some(t) = self.tracks.get_mut(device) {
                    t.alarm = AlarmState::Active {
                        since: *at,
                        at: *position,
                    };
                }
            }
            MonitorEvent::AlarmCleared { device, reference } => {
                if let Some(t) = self.tracks.get_mut(device) {
                    t.alarm = AlarmState::None;
                    t.reference = Some(*reference);
                }
            }
            MonitorEvent::TrackingError { device, at, .. } => {
                if let Some(t) = self.tracks.get_mut(device) {
                    t.last_signal_at = Some(*at);
                }
            }
            MonitorEvent::ApError { ap, .. } => {
                self.down_aps.insert(ap.clone());
                let reason = format!("access point {ap} disconnected");
                for t in self
                    .tracks
                    .values_mut()
                    .filter(|t| t.link == LinkState::Connected)
                {
                    t.link = LinkState::Error {
                        reason: reason.clone(),
                    };
                }
            }
            MonitorEvent::ApRestored { ap, .. } => {
                self.down_aps.remove(ap);
                let link = self.live_link();
                for t in self
                    .tracks
                    .values_mut()
                    .filter(|t| matches!(t.link, LinkState::Error { .. }))
                {
                    t.link = link.clone();
                }
            }
            MonitorEvent::DeviceDisconnected { device, .. } => {
                if let Some(t) = self.tracks.get_mut(device) {
                    t.link = LinkState::Disconnected;
                }
            }
            MonitorEvent::DeviceRenamed { device, name } => {
                if let Some(t) = self.tracks.get_mut(device) {
                    t.friendly.rename(name.clone());
                }
            }
        }
    }
}
