//! HTTP+JSON transport for [`Cms`].
//!
//! | method | path            | body                                        |
//! |--------|-----------------|---------------------------------------------|
//! | GET    | `/state`        |                                             |
//! | POST   | `/calibration`  | `{"pairs":[{"distance_m","total_time_s"}]}` or `{"action":"abort"}` |
//! | POST   | `/layout`       | `{"aps":[{"code","x","y"} x3]}`             |
//! | POST   | `/signal`       | `{"line","at"?}` or the raw wire line (`?at=` optional) |
//! | POST   | `/fault`        | `{"kind":"ap_disconnected","ap","at"?}` ... |
//! | POST   | `/refresh/{id}` |                                             |
//! | POST   | `/rename/{id}`  | `{"name"}`                                  |
//! | POST   | `/shutdown`     |                                             |
//! | GET    | `/events`       | NDJSON: history, then live (`?follow=false` stops after history) |

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use bluetrack_core::geometry::ApPlacement;
use bluetrack_core::monitor::{MonitorEvent, ShutdownCheck};
use bluetrack_core::protocol::DeviceId;

use crate::service::{Cms, CmsError, FaultReport, LoggedEvent};

pub struct ApiError(CmsError);

impl From<CmsError> for ApiError {
    fn from(e: CmsError) -> Self {
        ApiError(e)
    }
}

impl ApiError {
    fn kind(&self) -> (StatusCode, &'static str) {
        match &self.0 {
            CmsError::Parse(_) => (StatusCode::BAD_REQUEST, "parse_error"),
            CmsError::NotInitialized => (StatusCode::CONFLICT, "not_initialized"),
            CmsError::UnknownDevice(_) => (StatusCode::NOT_FOUND, "unknown_device"),
            CmsError::UnknownAp(_) => (StatusCode::NOT_FOUND, "unknown_ap"),
            CmsError::NoActiveAlarm(_) => (StatusCode::CONFLICT, "no_active_alarm"),
            CmsError::InvalidCode(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_code"),
            CmsError::DuplicateCode(_) => (StatusCode::UNPROCESSABLE_ENTITY, "duplicate_code"),
            CmsError::InvalidLayout(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_layout"),
            CmsError::Fit(_) => (StatusCode::UNPROCESSABLE_ENTITY, "fit_error"),
            CmsError::Config(_) => (StatusCode::INTERNAL_SERVER_ERROR, "config_error"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = self.kind();
        (
            status,
            Json(json!({ "error": kind, "message": self.0.to_string() })),
        )
            .into_response()
    }
}

fn bad_request(message: impl Into<String>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({ "error": "bad_request", "message": message.into() })),
    )
        .into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub distance_m: f64,
    pub total_time_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationAction {
    Submit,
    Abort,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationRequest {
    #[serde(default)]
    pub pairs: Vec<CalibrationPair>,
    pub action: Option<CalibrationAction>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayoutRequest {
    pub aps: Vec<ApPlacement>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SignalRequest {
    pub line: String,
    pub at: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct AtQuery {
    at: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenameRequest {
    pub name: String,
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    follow: Option<bool>,
}

pub fn router(cms: Arc<Cms>) -> Router {
    Router::new()
        .route("/state", get(state))
        .route("/calibration", post(calibration))
        .route("/layout", post(layout))
        .route("/signal", post(signal))
        .route("/fault", post(fault))
        .route("/refresh/{id}", post(refresh))
        .route("/rename/{id}", post(rename))
        .route("/shutdown", post(shutdown))
        .route("/events", get(events))
        .with_state(cms)
}

/// Serves until the service accepts a shutdown (or is force-stopped).
pub async fn serve(listener: tokio::net::TcpListener, cms: Arc<Cms>) -> std::io::Result<()> {
    let mut stopped = cms.stopped();
    axum::serve(listener, router(cms))
        .with_graceful_shutdown(async move {
            let _ = stopped.wait_for(|s| *s).await;
        })
        .await
}

async fn state(State(cms): State<Arc<Cms>>) -> impl IntoResponse {
    Json(cms.query_state())
}

async fn calibration(
    State(cms): State<Arc<Cms>>,
    Json(req): Json<CalibrationRequest>,
) -> Result<Response, ApiError> {
    if let Some(CalibrationAction::Abort) = req.action {
        return Ok(Json(cms.abort_calibration()).into_response());
    }
    let pairs: Vec<(f64, f64)> = req
        .pairs
        .iter()
        .map(|p| (p.distance_m, p.total_time_s))
        .collect();
    Ok(Json(cms.submit_calibration_pairs(&pairs)?).into_response())
}

async fn layout(
    State(cms): State<Arc<Cms>>,
    Json(req): Json<LayoutRequest>,
) -> Result<Response, ApiError> {
    let outcome = cms.set_layout_placements(req.aps)?;
    Ok(Json(json!({ "ok": true, "warning": outcome.warning })).into_response())
}

async fn signal(
    State(cms): State<Arc<Cms>>,
    Query(query): Query<AtQuery>,
    headers: HeaderMap,
    body: String,
) -> Result<Response, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let (line, at) = if is_json {
        match serde_json::from_str::<SignalRequest>(&body) {
            Ok(req) => (req.line, req.at.or(query.at)),
            Err(e) => return Ok(bad_request(e.to_string())),
        }
    } else {
        (body, query.at)
    };
    let events = cms.ingest_signal(&line, at)?;
    Ok(Json(json!({ "ok": true, "events": events })).into_response())
}

async fn fault(
    State(cms): State<Arc<Cms>>,
    Json(report): Json<FaultReport>,
) -> Result<Response, ApiError> {
    let events: Vec<MonitorEvent> = cms.report_fault(&report)?;
    Ok(Json(json!({ "ok": true, "events": events })).into_response())
}

fn device_id(raw: &str) -> Result<DeviceId, ApiError> {
    DeviceId::new(raw).map_err(|e| ApiError(CmsError::Parse(e)))
}

async fn refresh(
    State(cms): State<Arc<Cms>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    cms.refresh(&device_id(&id)?)?;
    Ok(Json(json!({ "ok": true })).into_response())
}

async fn rename(
    State(cms): State<Arc<Cms>>,
    Path(id): Path<String>,
    Json(req): Json<RenameRequest>,
) -> Result<Response, ApiError> {
    cms.rename_device(&device_id(&id)?, &req.name)?;
    Ok(Json(json!({ "ok": true })).into_response())
}

async fn shutdown(State(cms): State<Arc<Cms>>) -> Response {
    match cms.shutdown() {
        ShutdownCheck::Allowed => Json(ShutdownCheck::Allowed).into_response(),
        blocked => (StatusCode::CONFLICT, Json(blocked)).into_response(),
    }
}

fn ndjson_line(ev: &LoggedEvent) -> Result<String, Infallible> {
    let mut line = serde_json::to_string(ev).expect("events serialize");
    line.push('\n');
    Ok(line)
}

async fn events(State(cms): State<Arc<Cms>>, Query(query): Query<EventsQuery>) -> Response {
    let (history, rx) = cms.subscribe();
    let head = stream::iter(history.iter().map(ndjson_line).collect::<Vec<_>>());
    let body = if query.follow.unwrap_or(true) {
        let stopped = cms.stopped();
        // live tail; ends when the service stops. A subscriber that falls
        // more than the channel capacity behind skips the missed events.
        let live = stream::unfold((rx, stopped), |(mut rx, mut stopped)| async move {
            loop {
                let msg = tokio::select! {
                    msg = rx.recv() => msg,
                    _ = stopped.wait_for(|s| *s) => return None,
                };
                match msg {
                    Ok(ev) => return Some((ndjson_line(&ev), (rx, stopped))),
                    Err(RecvError::Lagged(_)) => continue,
                    Err(RecvError::Closed) => return None,
                }
            }
        });
        Body::from_stream(head.chain(live))
    } else {
        Body::from_stream(head)
    };
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}
