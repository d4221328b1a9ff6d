//! Wire formats shared by devices, access points and the monitoring service.
//!
//! A tracking signal is one newline-terminated ASCII line:
//!
//! ```text
//! SourceID,time_AP1,time_AP2,time_AP3
//! ```
//!
//! where each time is the total round-trip time in seconds to the matching
//! access point. Access points echo a device probe with their three-letter
//! code appended (`PING-1a2b3c4d:eWg`).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAX_DEVICE_ID_LEN: usize = 16;
const MIN_FRACTION_DIGITS: usize = 9;
const CODE_SEPARATOR: char = ':';

/// Identifier a tracker puts in front of every signal it sends.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(id: &str) -> Result<Self, ParseError> {
        let ok = !id.is_empty()
            && id.len() <= MAX_DEVICE_ID_LEN
            && id.bytes().all(|b| b.is_ascii_alphanumeric());
        if ok {
            Ok(DeviceId(id.to_owned()))
        } else {
            Err(ParseError::BadDeviceId(id.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DeviceId {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeviceId::new(s)
    }
}

impl TryFrom<String> for DeviceId {
    type Error = ParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        DeviceId::new(&s)
    }
}

impl From<DeviceId> for String {
    fn from(id: DeviceId) -> String {
        id.0
    }
}

/// Three-letter code an access point is given when it starts, e.g. `eWg`.
/// Codes are case-sensitive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ApCode(String);

impl ApCode {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Accepts exactly three ASCII letters.
pub fn validate_ap_code(text: &str) -> Result<ApCode, InvalidCode> {
    if text.len() == 3 && text.bytes().all(|b| b.is_ascii_alphabetic()) {
        Ok(ApCode(text.to_owned()))
    } else {
        Err(InvalidCode(text.to_owned()))
    }
}

impl fmt::Display for ApCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ApCode {
    type Err = InvalidCode;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        validate_ap_code(s)
    }
}

impl TryFrom<String> for ApCode {
    type Error = InvalidCode;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        validate_ap_code(&s)
    }
}

impl From<ApCode> for String {
    fn from(code: ApCode) -> String {
        code.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid access point code {0:?}: expected exactly three ASCII letters")]
pub struct InvalidCode(pub String);

/// Operator-visible label of a tracker. The id is fixed; the name can be
/// changed when a tracker is moved to another object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FriendlyName {
    pub name: String,
    pub id: DeviceId,
}

impl FriendlyName {
    pub fn new(name: impl Into<String>, id: DeviceId) -> Self {
        FriendlyName {
            name: name.into(),
            id,
        }
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }
}

impl fmt::Display for FriendlyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("expected 4 comma-separated fields, found {0}")]
    FieldCount(usize),
    #[error("invalid device id {0:?}")]
    BadDeviceId(String),
    #[error("time field {index} is not a number: {text:?}")]
    NonNumericTime { index: usize, text: String },
    #[error("time field {index} must be finite and > 0, got {value}")]
    NonPositiveTime { index: usize, value: f64 },
}

/// One report from a tracker: total round-trip times to AP1, AP2 and AP3.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSignal {
    pub source: DeviceId,
    pub times: [f64; 3],
}

impl TrackingSignal {
    pub fn new(source: DeviceId, times: [f64; 3]) -> Result<Self, ParseError> {
        for (i, &t) in times.iter().enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(ParseError::NonPositiveTime {
                    index: i + 1,
                    value: t,
                });
            }
        }
        Ok(TrackingSignal { source, times })
    }
}

/// Fixed-point decimal with at least nine fractional digits. More digits are
/// written when needed to reproduce the value exactly.
fn format_seconds(value: f64) -> String {
    // `Display` for f64 is the shortest exact representation and never uses
    // an exponent.
    let mut out = value.to_string();
    let fraction = match out.find('.') {
        Some(dot) => out.len() - dot - 1,
        None => {
            out.push('.');
            0
        }
    };
    for _ in fraction..MIN_FRACTION_DIGITS {
        out.push('0');
    }
    out
}

/// Renders a signal as its newline-terminated wire line.
pub fn encode_signal(sig: &TrackingSignal) -> String {
    let [t1, t2, t3] = sig.times;
    format!(
        "{},{},{},{}\n",
        sig.source,
        format_seconds(t1),
        format_seconds(t2),
        format_seconds(t3)
    )
}

/// Parses one wire line. A single trailing `\n` or `\r\n` is accepted.
pub fn decode_signal(line: &str) -> Result<TrackingSignal, ParseError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(ParseError::FieldCount(fields.len()));
    }
    let source = DeviceId::new(fields[0])?;
    let mut times = [0.0; 3];
    for (i, text) in fields[1..].iter().enumerate() {
        let value: f64 = text.parse().map_err(|_| ParseError::NonNumericTime {
            index: i + 1,
            text: (*text).to_owned(),
        })?;
        times[i] = value;
    }
    TrackingSignal::new(source, times)
}

impl FromStr for TrackingSignal {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        decode_signal(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("payload {0:?} already carries an access point code")]
    AlreadyCoded(String),
    #[error("invalid probe payload {0:?}")]
    BadPayload(String),
    #[error("frame {0:?} has no access point code suffix")]
    MissingCode(String),
    #[error(transparent)]
    Code(#[from] InvalidCode),
}

/// Probe token sent by a tracker: `PING-` followed by eight hex digits.
pub fn probe_token(nonce: u32) -> String {
    format!("PING-{nonce:08x}")
}

/// A probe echoed by an access point, tagged with that AP's code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoFrame {
    payload: String,
    code: ApCode,
}

impl EchoFrame {
    pub fn payload(&self) -> &str {
        &self.payload
    }

    pub fn code(&self) -> &ApCode {
        &self.code
    }

    pub fn to_line(&self) -> String {
        format!("{}{CODE_SEPARATOR}{}", self.payload, self.code)
    }

    pub fn parse(line: &str) -> Result<Self, FrameError> {
        let (payload, code) = line
            .rsplit_once(CODE_SEPARATOR)
            .ok_or_else(|| FrameError::MissingCode(line.to_owned()))?;
        append_code(payload, validate_ap_code(code)?)
    }
}

/// Attaches an AP code to an outgoing echo. A payload may carry one code
/// only; echoing an already-coded frame is rejected.
pub fn append_code(payload: &str, code: ApCode) -> Result<EchoFrame, FrameError> {
    if payload.contains(CODE_SEPARATOR) {
        return Err(FrameError::AlreadyCoded(payload.to_owned()));
    }
    if payload.is_empty() || payload.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(FrameError::BadPayload(payload.to_owned()));
    }
    Ok(EchoFrame {
        payload: payload.to_owned(),
        code,
    })
}

pub fn strip_code(frame: EchoFrame) -> (String, ApCode) {
    (frame.payload, frame.code)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("access point code {0} is already registered")]
pub struct DuplicateCode(pub ApCode);

/// Deployment-wide table of AP codes to AP names. Shared between threads.
#[derive(Debug, Default)]
pub struct CodeRegistry {
    inner: RwLock<HashMap<ApCode, String>>,
}

impl CodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, code: ApCode, name: impl Into<String>) -> Result<(), DuplicateCode> {
        let mut map = self.inner.write().expect("code registry poisoned");
        if map.contains_key(&code) {
            return Err(DuplicateCode(code));
        }
        map.insert(code, name.into());
        Ok(())
    }

    pub fn name_of(&self, code: &ApCode) -> Option<String> {
        self.inner
            .read()
            .expect("code registry poisoned")
            .get(code)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("code registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
