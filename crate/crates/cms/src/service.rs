use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, watch};

use bluetrack_core::calibration::{
    fit, CalibrationError, CalibrationSet, ChannelParams, MIN_SAMPLES,
};
use bluetrack_core::geometry::{check_geometry, ApLayout, ApPlacement, GeometryVerdict, Point2D};
use bluetrack_core::monitor::{
    AlarmState, LinkState, MonitorConfig, MonitorEngine, MonitorError, MonitorEvent, ShutdownCheck,
};
use bluetrack_core::protocol::{
    decode_signal, validate_ap_code, ApCode, DeviceId, InvalidCode, ParseError,
};

const EVENT_BUFFER: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmsError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("system not initialized: calibration and AP coordinates are required")]
    NotInitialized,
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("unknown access point {0}")]
    UnknownAp(ApCode),
    #[error("device {0} has no active alarm")]
    NoActiveAlarm(DeviceId),
    #[error(transparent)]
    InvalidCode(#[from] InvalidCode),
    #[error("access point code {0} entered twice")]
    DuplicateCode(ApCode),
    #[error("invalid access point layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Fit(#[from] CalibrationError),
    #[error("invalid monitor config: {0}")]
    Config(String),
}

impl From<MonitorError> for CmsError {
    fn from(e: MonitorError) -> Self {
        match e {
            MonitorError::NotInitialized => CmsError::NotInitialized,
            MonitorError::UnknownDevice(id) => CmsError::UnknownDevice(id),
            MonitorError::UnknownAp(code) => CmsError::UnknownAp(code),
            MonitorError::NoActiveAlarm(id) => CmsError::NoActiveAlarm(id),
            MonitorError::InvalidConfig(msg) => CmsError::Config(msg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Uninitialized,
    /// Calibration or AP coordinates entered, but not both.
    Calibrating,
    Ready,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOption {
    Continue,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CalibrationOutcome {
    Fitted {
        params: ChannelParams,
    },
    /// Fewer than five pairs: the operator may add more or abort.
    Prompt {
        count: usize,
        required: usize,
        options: Vec<PromptOption>,
    },
    Aborted {
        phase: Phase,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutOutcome {
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Default,
    Alarmed,
}

/// Device as shown to operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub id: DeviceId,
    pub name: String,
    /// `Name(ID)` label.
    pub label: String,
    pub initial: Option<Point2D>,
    pub position: Option<Point2D>,
    pub alarm: AlarmState,
    pub marker: Marker,
    pub link: LinkState,
    pub last_signal_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub phase: Phase,
    pub params: Option<ChannelParams>,
    pub layout: Option<ApLayout>,
    pub devices: Vec<DeviceView>,
    pub disconnected_aps: Vec<ApCode>,
    /// Sequence number of the last event folded into this snapshot.
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: MonitorEvent,
}

/// Device-side report of a link fault. The CMS never talks to APs
/// directly; it learns about their state through these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultReport {
    ApDisconnected { ap: ApCode, at: Option<f64> },
    ApReconnected { ap: ApCode, at: Option<f64> },
    DeviceOffline { device: DeviceId, at: Option<f64> },
}

struct Inner {
    engine: MonitorEngine,
    log: Vec<LoggedEvent>,
}

/// The central monitoring system. Cheap to share behind an [`Arc`].
pub struct Cms {
    inner: Mutex<Inner>,
    events: broadcast::Sender<Arc<LoggedEvent>>,
    stop: watch::Sender<bool>,
    started: Instant,
}

impl Cms {
    pub fn new(config: MonitorConfig) -> Result<Self, CmsError> {
        let engine = MonitorEngine::new(config)?;
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let (stop, _) = watch::channel(false);
        Ok(Cms {
            inner: Mutex::new(Inner {
                engine,
                log: Vec::new(),
            }),
            events,
            stop,
            started: Instant::now(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("cms state poisoned")
    }

    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn publish(&self, inner: &mut Inner, events: Vec<MonitorEvent>) {
        for event in events {
            let logged = LoggedEvent {
                seq: inner.log.len() as u64 + 1,
                event,
            };
            inner.log.push(logged.clone());
            // no subscribers is fine
            let _ = self.events.send(Arc::new(logged));
        }
    }

    pub fn config(&self) -> MonitorConfig {
        *self.lock().engine.config()
    }

    pub fn phase(&self) -> Phase {
        phase_of(&self.lock().engine)
    }

    /// Fits signal speed and transmission error from `(distance m, total
    /// time s)` pairs. Re-running it starts a new tracking epoch.
    pub fn submit_calibration_pairs(
        &self,
        pairs: &[(f64, f64)],
    ) -> Result<CalibrationOutcome, CmsError> {
        let set = CalibrationSet::from_pairs(pairs)?;
        if set.len() < MIN_SAMPLES {
            return Ok(CalibrationOutcome::Prompt {
                count: set.len(),
                required: MIN_SAMPLES,
                options: vec![PromptOption::Continue, PromptOption::Abort],
            });
        }
        let params = fit(&set)?;
        self.apply_params(params);
        Ok(CalibrationOutcome::Fitted { params })
    }

    /// Installs already fitted parameters.
    pub fn apply_params(&self, params: ChannelParams) {
        let mut inner = self.lock();
        let events = inner.engine.set_params(params);
        self.publish(&mut inner, events);
    }

    /// Operator abandons an initialization prompt. Nothing is stored.
    pub fn abort_calibration(&self) -> CalibrationOutcome {
        CalibrationOutcome::Aborted {
            phase: self.phase(),
        }
    }

    /// Stores the AP coordinates. A collinear layout is accepted with a
    /// warning so the operator can correct it.
    pub fn set_ap_coordinates(
        &self,
        entries: &[(&str, f64, f64)],
    ) -> Result<LayoutOutcome, CmsError> {
        let mut placements = Vec::with_capacity(entries.len());
        for &(code, x, y) in entries {
            placements.push(ApPlacement {
                code: validate_ap_code(code)?,
                x,
                y,
            });
        }
        self.set_layout_placements(placements)
    }

    pub fn set_layout_placements(
        &self,
        placements: Vec<ApPlacement>,
    ) -> Result<LayoutOutcome, CmsError> {
        for (i, p) in placements.iter().enumerate() {
            if placements[..i].iter().any(|q| q.code == p.code) {
                return Err(CmsError::DuplicateCode(p.code.clone()));
            }
        }
        let layout = ApLayout::try_from(placements).map_err(CmsError::InvalidLayout)?;
        Ok(self.set_layout(layout))
    }

    pub fn set_layout(&self, layout: ApLayout) -> LayoutOutcome {
        let warning = match check_geometry(&layout) {
            GeometryVerdict::Ok => None,
            GeometryVerdict::Degenerate { denom, floor } => Some(format!(
                "access points are nearly collinear (Gram determinant {denom:e} < {floor:e}); positions cannot be computed"
            )),
        };
        let mut inner = self.lock();
        let events = inner.engine.set_layout(layout);
        self.publish(&mut inner, events);
        LayoutOutcome { warning }
    }

    /// Decodes one wire line and runs it through the monitoring engine.
    /// `at` defaults to seconds since the service started.
    pub fn ingest_signal(
        &self,
        line: &str,
        at: Option<f64>,
    ) -> Result<Vec<MonitorEvent>, CmsError> {
        let mut inner = self.lock();
        if !inner.engine.is_initialized() {
            return Err(CmsError::NotInitialized);
        }
        let sig = decode_signal(line)?;
        let events = inner
            .engine
            .process_signal(&sig, at.unwrap_or_else(|| self.now()))?;
        self.publish(&mut inner, events.clone());
        Ok(events)
    }

    pub fn report_fault(&self, report: &FaultReport) -> Result<Vec<MonitorEvent>, CmsError> {
        let mut inner = self.lock();
        let events = match report {
            FaultReport::ApDisconnected { ap, at } => inner
                .engine
                .handle_ap_disconnect(ap, at.unwrap_or_else(|| self.now()))?,
            FaultReport::ApReconnected { ap, at } => inner
                .engine
                .handle_ap_reconnect(ap, at.unwrap_or_else(|| self.now()))?,
            FaultReport::DeviceOffline { device, at } => inner
                .engine
                .handle_device_offline(device, at.unwrap_or_else(|| self.now()))?,
        };
        self.publish(&mut inner, events.clone());
        Ok(events)
    }

    /// The Refresh button: clears the device alarm.
    pub fn refresh(&self, device: &DeviceId) -> Result<(), CmsError> {
        let mut inner = self.lock();
        let events = inner.engine.acknowledge(device)?;
        self.publish(&mut inner, events);
        Ok(())
    }

    pub fn rename_device(&self, device: &DeviceId, name: &str) -> Result<(), CmsError> {
        let mut inner = self.lock();
        let events = inner.engine.rename(device, name)?;
        self.publish(&mut inner, events);
        Ok(())
    }

    /// Exit request. Allowed only when no device is connected; on success
    /// the HTTP server is told to stop.
    pub fn shutdown(&self) -> ShutdownCheck {
        let check = self.lock().engine.can_shutdown();
        if check == ShutdownCheck::Allowed {
            self.stop.send_replace(true);
        }
        check
    }

    /// Stops the HTTP server regardless of connected devices.
    pub fn force_stop(&self) {
        self.stop.send_replace(true);
    }

    pub fn can_shutdown(&self) -> ShutdownCheck {
        self.lock().engine.can_shutdown()
    }

    /// Resolves once [`Self::shutdown`] has succeeded.
    pub fn stopped(&self) -> watch::Receiver<bool> {
        self.stop.subscribe()
    }

    pub fn query_state(&self) -> Snapshot {
        let inner = self.lock();
        snapshot_of(&inner.engine, inner.log.len() as u64)
    }

    pub fn event_log(&self) -> Vec<LoggedEvent> {
        self.lock().log.clone()
    }

    /// History so far plus a receiver for everything after it, with no gap.
    pub fn subscribe(&self) -> (Vec<LoggedEvent>, broadcast::Receiver<Arc<LoggedEvent>>) {
        let inner = self.lock();
        (inner.log.clone(), self.events.subscribe())
    }
}

fn phase_of(engine: &MonitorEngine) -> Phase {
    match (engine.params().is_some(), engine.layout().is_some()) {
        (true, true) => Phase::Ready,
        (false, false) => Phase::Uninitialized,
        _ => Phase::Calibrating,
    }
}

/// Operator view of an engine state.
pub fn snapshot_of(engine: &MonitorEngine, last_seq: u64) -> Snapshot {
    let engine_state = engine.snapshot();
    let devices = engine_state
        .devices
        .into_iter()
        .map(|t| DeviceView {
            label: t.friendly.to_string(),
            name: t.friendly.name,
            marker: if t.alarm.is_active() {
                Marker::Alarmed
            } else {
                Marker::Default
            },
            id: t.id,
            initial: t.initial,
            position: t.last,
            alarm: t.alarm,
            link: t.link,
            last_signal_at: t.last_signal_at,
        })
        .collect();
    Snapshot {
        phase: phase_of(engine),
        params: engine_state.params,
        layout: engine_state.layout,
        devices,
        disconnected_aps: engine_state.disconnected_aps,
        last_seq,
    }
}

/// Folds an event log into a fresh engine and returns its snapshot.
pub fn replay_snapshot(config: MonitorConfig, log: &[LoggedEvent]) -> Result<Snapshot, CmsError> {
    let engine = MonitorEngine::replay(config, log.iter().map(|l| &l.event))?;
    Ok(snapshot_of(&engine, log.last().map_or(0, |l| l.seq)))
}
