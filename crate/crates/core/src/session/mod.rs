//! Session orchestration: drives one worker over one stream and query set.
//!
//! Under the virtual clock the harness and worker advance in lock step. The
//! harness takes its own sends in logical time order (frame emissions, query
//! launches and query dispatches), waits for the worker's reply to each, and
//! reads every timestamp off the replies. The resulting log is a pure
//! function of the inputs.
//!
//! Under the wall clock frames and query launches go out on their own
//! threads at their scheduled times, and every worker reply is stamped with
//! its arrival time at the harness.
//!
//! Queries run one at a time: query k+1 launches at the later of its own
//! launch time and the completion of query k.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bank::{BankError, MemoryBank, TokenBlock};
use crate::budget::{token_cap, ByteBudget, ModelProfile};
use crate::protocol::{
    DecodeError, Hello, HelloAck, LinkError, Message, Mode, Query, Turn, Violation, WorkerLink,
    PROTOCOL_VERSION,
};
use crate::time::{ClockKind, Timestamp};

mod events;
mod lockstep;
mod manifest;
mod wall;

pub use events::{EventKind, EventLog, LogError, LogHeader, SessionEvent, LOG_SCHEMA};
pub use manifest::{
    ingest_manifests, load_query_manifest, load_stream_manifest, parse_query_manifest,
    parse_stream_manifest, ManifestError, QuerySpec, SessionPlan, StreamPlan, SyntheticStream,
};

pub const DEFAULT_MAX_QUEUE: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub session_id: String,
    pub mode: Mode,
    pub clock: ClockKind,
    pub seed: u64,
    /// Sent in the hello; required in adapter mode.
    pub profile: Option<ModelProfile>,
    /// Memory budget; required in adapter mode.
    pub budget: Option<ByteBudget>,
    /// Abort once this many frames are waiting to be encoded.
    pub max_queue: u64,
    /// Send prior question/answer turns with each query.
    pub dialogue_context: bool,
    /// Extra string settings forwarded in the hello config.
    pub worker_config: BTreeMap<String, String>,
}

impl SessionConfig {
    pub fn new(session_id: impl Into<String>, mode: Mode, clock: ClockKind) -> Self {
        SessionConfig {
            session_id: session_id.into(),
            mode,
            clock,
            seed: 0,
            profile: None,
            budget: None,
            max_queue: DEFAULT_MAX_QUEUE,
            dialogue_context: false,
            worker_config: BTreeMap::new(),
        }
    }

    pub fn with_budget(mut self, profile: ModelProfile, budget: ByteBudget) -> Self {
        self.profile = Some(profile);
        self.budget = Some(budget);
        self
    }

    /// Token capacity of the adapter bank, when a budget is configured.
    pub fn capacity_tokens(&self) -> Option<u64> {
        match (&self.profile, self.budget) {
            (Some(p), Some(b)) => Some(token_cap(b, p)),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), SessionError> {
        if self.mode == Mode::Adapter {
            match self.capacity_tokens() {
                None => {
                    return Err(SessionError::Config(
                        "adapter mode needs a model profile and a memory budget".into(),
                    ))
                }
                Some(0) => {
                    return Err(SessionError::Config(
                        "memory budget is smaller than one token for this profile".into(),
                    ))
                }
                Some(_) => {}
            }
        }
        if self.max_queue == 0 {
            return Err(SessionError::Config("max_queue must be >= 1".into()));
        }
        Ok(())
    }

    fn hello(&self) -> Message {
        let mut config = self.worker_config.clone();
        config.insert("clock".into(), self.clock.to_string());
        config.insert("seed".into(), self.seed.to_string());
        Message::Hello(Hello {
            protocol: PROTOCOL_VERSION,
            session_id: self.session_id.clone(),
            mode: self.mode,
            profile: self.profile.clone(),
            capacity_tokens: if self.mode == Mode::Adapter {
                self.capacity_tokens()
            } else {
                None
            },
            config,
        })
    }

    fn log_header(&self, plan: &SessionPlan, worker: Option<&HelloAck>) -> LogHeader {
        LogHeader {
            schema: LOG_SCHEMA.into(),
            session_id: self.session_id.clone(),
            mode: self.mode,
            clock: self.clock,
            fps: plan.stream.schedule.fps(),
            frames: plan.stream.len() as u64,
            seed: self.seed,
            model_id: self.profile.as_ref().map(|p| p.model_id().to_string()),
            params_billions: self.profile.as_ref().map(|p| p.params_billions()),
            budget_bytes: self.budget.map(|b| b.bytes()),
            capacity_tokens: self.capacity_tokens(),
            worker: worker.map(|a| a.worker_name.clone()),
        }
    }
}

/// Why a running session stopped early.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbortReason {
    #[error("protocol violation: {0}")]
    Protocol(#[from] Violation),
    #[error("malformed worker output: {0}")]
    Malformed(#[from] DecodeError),
    #[error("expected {expected} from worker, got `{got}`")]
    UnexpectedReply { expected: String, got: String },
    #[error("worker error {code}: {detail}")]
    Worker { code: String, detail: String },
    #[error("worker link failed: {0}")]
    Link(String),
    #[error("encode backlog reached {depth} frames (limit {limit})")]
    QueueOverflow { depth: u64, limit: u64 },
    #[error("memory bank: {0}")]
    Bank(#[from] BankError),
    #[error("{0}")]
    Causality(String),
}

impl From<LinkError> for AbortReason {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::Decode(d) => AbortReason::Malformed(d),
            other => AbortReason::Link(other.to_string()),
        }
    }
}

impl AbortReason {
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            AbortReason::Protocol(_)
                | AbortReason::Malformed(_)
                | AbortReason::UnexpectedReply { .. }
                | AbortReason::Causality(_)
        )
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("session aborted: {reason}")]
    Aborted {
        reason: AbortReason,
        /// Everything recorded up to the abort.
        partial: Box<SessionOutcome>,
    },
}

impl SessionError {
    /// Process exit code: 1 usage/config, 2 protocol, 3 worker failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SessionError::Config(_) => 1,
            SessionError::Aborted { reason, .. } if reason.is_protocol() => 2,
            SessionError::Aborted {
                reason: AbortReason::Bank(BankError::OversizeBlock { .. }),
                ..
            } => 1,
            SessionError::Aborted { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub log: EventLog,
    /// Every protocol message in the order the harness checked it.
    pub transcript: Vec<Message>,
    pub worker: Option<HelloAck>,
}

/// Builds the `query` message for `spec` once it has been encoded at `t1`.
///
/// `snapshot` is the bank content at `t1` (adapter mode only). Fails if
/// `t1` precedes the launch time.
pub fn dispatch_query(
    spec: &QuerySpec,
    t1: Timestamp,
    snapshot: Option<&[TokenBlock]>,
    transcript: Option<&[Turn]>,
) -> Result<Message, AbortReason> {
    if t1 < spec.t0 {
        return Err(AbortReason::Causality(format!(
            "query `{}` encoded at {t1} before its launch at {}",
            spec.query_id, spec.t0
        )));
    }
    Ok(Message::Query(Query {
        query_id: spec.query_id.clone(),
        t0: spec.t0.as_secs_f64(),
        text: spec.text.clone(),
        options: spec.options.clone(),
        snapshot_frame_ids: snapshot.map(|s| s.iter().map(|b| b.frame_id).collect()),
        transcript: transcript.map(<[Turn]>::to_vec),
    }))
}

fn launched_event(spec: &QuerySpec) -> SessionEvent {
    SessionEvent::new(
        spec.t0,
        EventKind::QueryLaunched {
            query_id: spec.query_id.clone(),
            task: spec.task.clone(),
            cluster: spec.cluster.clone(),
            gold: spec.gold.clone(),
            options: spec.option_labels(),
        },
    )
}

/// Writes an encoded frame into the bank and returns its log event.
fn bank_write(
    bank: &mut MemoryBank,
    frame_id: u64,
    token_count: Option<u64>,
    handle: Option<String>,
    t_ready: Timestamp,
) -> Result<SessionEvent, AbortReason> {
    let tokens = token_count.ok_or_else(|| AbortReason::UnexpectedReply {
        expected: "token_count in adapter mode".into(),
        got: format!("frame_encoded {frame_id} without it"),
    })?;
    let block = TokenBlock::new(frame_id, tokens, t_ready).with_handle(handle.unwrap_or_default());
    let outcome = bank.write(block)?;
    Ok(SessionEvent::new(
        t_ready,
        EventKind::BankWrite {
            frame_id,
            evicted: outcome.evicted,
            resident_tokens: bank.total_tokens(),
        },
    ))
}

/// Runs one session to completion over `link`.
pub fn run_session(
    config: &SessionConfig,
    plan: &SessionPlan,
    link: WorkerLink,
) -> Result<SessionOutcome, SessionError> {
    config.validate()?;
    match config.clock {
        ClockKind::Virtual => lockstep::run(config, plan, link),
        ClockKind::Wall => wall::run(config, plan, link),
    }
}
