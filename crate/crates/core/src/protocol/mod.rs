//! Harness/worker wire protocol.
//!
//! Each message is one UTF-8 JSON object terminated by `\n`. The `type` key
//! comes first and names the message; the remaining keys follow in the order
//! documented on each struct. Optional fields are omitted when absent.
//! Readers ignore keys they do not know.
//!
//! A session looks like this (adapter mode):
//!
//! ```text
//! harness -> hello             worker -> hello_ack
//! harness -> frame 0           worker -> frame_encoded 0
//! harness -> query_launch q1   worker -> query_encoded q1 (t1)
//! harness -> query q1 (+snapshot at t1)
//!                              worker -> token q1 ... answer_done q1
//! harness -> shutdown
//! ```
//!
//! `query_launch` hands the question to the worker at its launch time t0 so
//! it can be encoded. Only once the worker reports `query_encoded` at t1 does
//! the harness know which memory is admissible; it then sends `query`, which
//! in adapter mode carries the frame ids resident in the memory bank at t1.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::budget::ModelProfile;

mod fsm;
mod link;
mod wire;

pub use fsm::{validate_sequence, ProtocolMachine, Rule, Violation};
pub use link::{
    connect_tcp, duplex, spawn_worker, LineSink, LineSource, LinkError, MessageSink, MessageSource,
    WorkerLink,
};
pub use wire::{decode_message, encode_message, DecodeError};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The worker manages its own memory; the harness enforces timing only.
    Native,
    /// The harness manages a bounded FIFO memory bank on the worker's behalf.
    Adapter,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Native => "native",
            Mode::Adapter => "adapter",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Mode::Native),
            "adapter" => Ok(Mode::Adapter),
            other => Err(format!(
                "unknown mode `{other}` (expected native or adapter)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

/// `hello`: protocol, session_id, mode, profile?, capacity_tokens?, config.
#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub protocol: u64,
    pub session_id: String,
    pub mode: Mode,
    pub profile: Option<ModelProfile>,
    pub capacity_tokens: Option<u64>,
    pub config: BTreeMap<String, String>,
}

/// `frame`: frame_id, t_emit, payload_ref.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub t_emit: f64,
    pub payload_ref: String,
}

/// `query_launch`: query_id, t0, text.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLaunch {
    pub query_id: String,
    pub t0: f64,
    pub text: String,
}

/// `query`: query_id, t0, text, options, snapshot_frame_ids?, transcript?.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub t0: f64,
    pub text: String,
    pub options: Vec<AnswerOption>,
    pub snapshot_frame_ids: Option<Vec<u64>>,
    pub transcript: Option<Vec<Turn>>,
}

/// `hello_ack`: worker_name, capabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct HelloAck {
    pub worker_name: String,
    pub capabilities: Vec<String>,
}

/// `frame_encoded`: frame_id, t_done, token_count?, handle?.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoded {
    pub frame_id: u64,
    pub t_done: f64,
    pub token_count: Option<u64>,
    pub handle: Option<String>,
}

/// `query_encoded`: query_id, t1.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoded {
    pub query_id: String,
    pub t1: f64,
}

/// `token`: query_id, t, text_piece.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub query_id: String,
    pub t: f64,
    pub text_piece: String,
}

/// `answer_done`: query_id, t_last, final_text.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDone {
    pub query_id: String,
    pub t_last: f64,
    pub final_text: String,
}

/// `worker_error`: code, detail, frame_id?, query_id?.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerError {
    pub code: String,
    pub detail: String,
    pub frame_id: Option<u64>,
    pub query_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToWorker,
    ToHarness,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Frame(Frame),
    QueryLaunch(QueryLaunch),
    Query(Query),
    Shutdown,
    HelloAck(HelloAck),
    FrameEncoded(FrameEncoded),
    QueryEncoded(QueryEncoded),
    Token(Token),
    AnswerDone(AnswerDone),
    WorkerError(WorkerError),
}

impl Message {
    /// The `type` tag used on the wire.
    pub fn tag(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Frame(_) => "frame",
            Message::QueryLaunch(_) => "query_launch",
            Message::Query(_) => "query",
            Message::Shutdown => "shutdown",
            Message::HelloAck(_) => "hello_ack",
            Message::FrameEncoded(_) => "frame_encoded",
            Message::QueryEncoded(_) => "query_encoded",
            Message::Token(_) => "token",
            Message::AnswerDone(_) => "answer_done",
            Message::WorkerError(_) => "worker_error",
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Message::Hello(_)
            | Message::Frame(_)
            | Message::QueryLaunch(_)
            | Message::Query(_)
            | Message::Shutdown => Direction::ToWorker,
            _ => Direction::ToHarness,
        }
    }
}
