//! Append-only JSON-lines session event log.
//!
//! Each line is `{"type", "timestamp", "seed", "request_id", "payload"}`,
//! plus the `response` a client received when the event came from a request.
//! A torn final line (no trailing newline and unparsable) is dropped on
//! read; any other malformed line is an error.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use cdi_core::discovery::{DiscoveryConfig, Feedback, SessionEvent};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    #[serde(rename = "type")]
    pub kind: String,
    /// RFC 3339 wall-clock time of the append.
    pub timestamp: String,
    /// Session seed; every random draw derives from it.
    pub seed: u64,
    #[serde(default)]
    pub request_id: Option<String>,
    #[serde(default)]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Value>,
}

impl LoggedEvent {
    pub fn new(event: &SessionEvent, seed: u64, request_id: Option<String>) -> Self {
        let (kind, payload) = match event {
            SessionEvent::Init { config } => ("init", serde_json::to_value(config).expect("config serializes")),
            SessionEvent::Feedback { feedback } => ("feedback", serde_json::to_value(feedback).expect("feedback serializes")),
            SessionEvent::Advance => ("advance", Value::Null),
            SessionEvent::Finalize => ("finalize", Value::Null),
        };
        Self {
            kind: kind.into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            seed,
            request_id,
            payload,
            response: None,
        }
    }

    pub fn event(&self) -> Result<SessionEvent> {
        Ok(match self.kind.as_str() {
            "init" => SessionEvent::Init {
                config: serde_json::from_value::<DiscoveryConfig>(self.payload.clone())?,
            },
            "feedback" => SessionEvent::Feedback {
                feedback: serde_json::from_value::<Feedback>(self.payload.clone())?,
            },
            "advance" => SessionEvent::Advance,
            "finalize" => SessionEvent::Finalize,
            other => return Err(Error::Config(format!("unknown event type `{other}`"))),
        })
    }
}

/// Appends one event and flushes it to stable storage.
pub fn append(path: &Path, event: &LoggedEvent) -> Result<()> {
    let mut line = serde_json::to_string(event)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

pub fn parse(text: &str, name: &str) -> Result<Vec<LoggedEvent>> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LoggedEvent>(line) {
            Ok(e) => out.push(e),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(Error::Text {
                    source_name: name.to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<LoggedEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

pub fn events(log: &[LoggedEvent]) -> Result<Vec<SessionEvent>> {
    log.iter().map(LoggedEvent::event).collect()
}
