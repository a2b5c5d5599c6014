//! Tamper-evident JSON-lines session log.
//!
//! Each line is one event `{seq, kind, payload, prev_digest}` where
//! `prev_digest` is the hex SHA-256 of the previous line's bytes (64 zeros for
//! the first line). Numbers inside payloads are written as decimal strings.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{AuditError, Result};

pub const GENESIS_DIGEST: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventKind {
    Open,
    Draw,
    Mvr,
    Risk,
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub prev_digest: String,
}

pub fn digest(line: &str) -> String {
    hex::encode(Sha256::digest(line.as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    lines: Vec<String>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn last_digest(&self) -> String {
        self.lines
            .last()
            .map(|l| digest(l))
            .unwrap_or_else(|| GENESIS_DIGEST.to_owned())
    }

    pub fn append(&mut self, kind: EventKind, payload: Value) -> &str {
        let event = TranscriptEvent {
            seq: self.lines.len() as u64 + 1,
            kind,
            payload,
            prev_digest: self.last_digest(),
        };
        let line = serde_json::to_string(&event).expect("event serializes");
        self.lines.push(line);
        self.lines.last().expect("just pushed")
    }

    /// Newline-terminated JSON lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    /// Parses a transcript and checks sequence numbers and the digest chain.
    pub fn parse(text: &str) -> Result<Vec<TranscriptEvent>> {
        let mut prev = GENESIS_DIGEST.to_owned();
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let event: TranscriptEvent =
                serde_json::from_str(line).map_err(|e| AuditError::Parse {
                    file: "transcript".into(),
                    line: line_no,
                    column: e.column() as u64,
                    message: e.to_string(),
                })?;
            if event.prev_digest != prev || event.seq != events.len() as u64 + 1 {
                return Err(AuditError::ChainBroken { line: line_no });
            }
            prev = digest(line);
            events.push(event);
        }
        Ok(events)
    }
}
