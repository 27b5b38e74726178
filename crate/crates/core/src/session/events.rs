//! Session event log.
//!
//! A log is one header line followed by one event per line, sorted by time.
//! Events at the same instant keep a fixed kind order (emission before
//! encoding before queries), so a virtual-clock session always serializes to
//! the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Mode;
use crate::time::{ClockKind, Timestamp};

pub const LOG_SCHEMA: &str = "streameval-events/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    FrameEmitted {
        frame_id: u64,
    },
    /// Frames emitted but not yet encoded, sampled at each emission.
    BacklogSample {
        depth: u64,
    },
    FrameEncoded {
        frame_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token_count: Option<u64>,
    },
    BankWrite {
        frame_id: u64,
        evicted: Vec<u64>,
        resident_tokens: u64,
    },
    QueryLaunched {
        query_id: String,
        task: String,
        cluster: String,
        gold: String,
        options: Vec<String>,
    },
    /// The query finished encoding; in adapter mode `snapshot` lists the
    /// bank contents it was answered against.
    QueryEncoded {
        query_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot: Option<Vec<u64>>,
    },
    FirstToken {
        query_id: String,
    },
    AnswerDone {
        query_id: String,
        final_text: String,
    },
    SessionAborted {
        reason: String,
    },
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::FrameEmitted { .. } => 0,
            EventKind::BacklogSample { .. } => 1,
            EventKind::FrameEncoded { .. } => 2,
            EventKind::BankWrite { .. } => 3,
            EventKind::QueryLaunched { .. } => 4,
            EventKind::QueryEncoded { .. } => 5,
            EventKind::FirstToken { .. } => 6,
            EventKind::AnswerDone { .. } => 7,
            EventKind::SessionAborted { .. } => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub t: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl SessionEvent {
    pub fn new(t: Timestamp, kind: EventKind) -> Self {
        SessionEvent { t, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub session_id: String,
    pub mode: Mode,
    pub clock: ClockKind,
    pub fps: f64,
    pub frames: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_billions: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<String>,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event log schema `{0}` is not supported (expected {LOG_SCHEMA})")]
    Schema(String),
    #[error("event log i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub header: LogHeader,
    pub events: Vec<SessionEvent>,
}

impl EventLog {
    /// Builds a log, ordering events by time then kind. The sort is stable,
    /// so equal keys keep their recording order.
    pub fn new(header: LogHeader, mut events: Vec<SessionEvent>) -> Self {
        events.sort_by_key(|e| (e.t, e.kind.rank()));
        EventLog { header, events }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LogError::Parse {
            line: 1,
            message: "empty log".into(),
        })?;
        let header: LogHeader = serde_json::from_str(first).map_err(|e| LogError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.schema != LOG_SCHEMA {
            return Err(LogError::Schema(header.schema));
        }
        let events = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LogError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<SessionEvent>, _>>()?;
        Ok(EventLog { header, events })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), LogError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, LogError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn aborted(&self) -> Option<&str> {
        self.events.iter().find_map(|e| match &e.kind {
            EventKind::SessionAborted { reason } => Some(reason.as_str()),
            _ => None,
        })
    }

    /// Largest sampled backlog depth.
    pub fn max_backlog(&self) -> u64 {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::BacklogSample { depth } => Some(depth),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: f64) -> Timestamp {
        Timestamp::from_secs_f64(s).unwrap()
    }

    fn header() -> LogHeader {
        LogHeader {
            schema: LOG_SCHEMA.into(),
            session_id: "s".into(),
            mode: Mode::Native,
            clock: ClockKind::Virtual,
            fps: 1.0,
            frames: 2,
            seed: 0,
            model_id: None,
            params_billions: None,
            budget_bytes: None,
            capacity_tokens: None,
            worker: None,
        }
    }

    #[test]
    fn events_sort_by_time_then_kind() {
        let log = EventLog::new(
            header(),
            vec![
                SessionEvent::new(
                    ts(1.0),
                    EventKind::FrameEncoded {
                        frame_id: 0,
                        token_count: None,
                    },
                ),
                SessionEvent::new(ts(1.0), EventKind::FrameEmitted { frame_id: 1 }),
                SessionEvent::new(ts(0.0), EventKind::FrameEmitted { frame_id: 0 }),
            ],
        );
        let kinds: Vec<u8> = log.events.iter().map(|e| e.kind.rank()).collect();
        assert_eq!(kinds, vec![0, 0, 2]);
        assert_eq!(log.events[1].t, ts(1.0));
    }

    #[test]
    fn jsonl_round_trip() {
        let log = EventLog::new(
            header(),
            vec![
                SessionEvent::new(ts(0.0), EventKind::FrameEmitted { frame_id: 0 }),
                SessionEvent::new(
                    ts(0.5),
                    EventKind::QueryEncoded {
                        query_id: "q".into(),
                        snapshot: Some(vec![0]),
                    },
                ),
            ],
        );
        let text = log.to_jsonl();
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("{\"t\":0.0,\"kind\":\"frame_emitted\""));
        assert_eq!(EventLog::from_jsonl(&text).unwrap(), log);
    }

    #[test]
    fn rejects_foreign_schema() {
        let mut h = header();
        h.schema = "other/9".into();
        let text = EventLog::new(h, vec![]).to_jsonl();
        assert!(matches!(
            EventLog::from_jsonl(&text),
            Err(LogError::Schema(_))
        ));
    }
}
