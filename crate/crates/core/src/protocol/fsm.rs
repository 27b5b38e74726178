use std::collections::HashMap;
use std::fmt;

use super::*;

/// Protocol rules, each with a stable code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    ExpectedHello,
    DuplicateHello,
    UnexpectedHelloAck,
    NotStreaming,
    DuplicateShutdown,
    DuplicateFrame,
    UnknownFrame,
    DuplicateFrameEncoded,
    DuplicateQuery,
    UnknownQuery,
    QueryOutOfPhase,
    ModeDiscipline,
    TimestampOrder,
    SnapshotNotReady,
}

impl Rule {
    pub fn code(self) -> &'static str {
        match self {
            Rule::ExpectedHello => "expected-hello",
            Rule::DuplicateHello => "duplicate-hello",
            Rule::UnexpectedHelloAck => "unexpected-hello-ack",
            Rule::NotStreaming => "not-streaming",
            Rule::DuplicateShutdown => "duplicate-shutdown",
            Rule::DuplicateFrame => "duplicate-frame",
            Rule::UnknownFrame => "unknown-frame",
            Rule::DuplicateFrameEncoded => "duplicate-frame-encoded",
            Rule::DuplicateQuery => "duplicate-query",
            Rule::UnknownQuery => "unknown-query",
            Rule::QueryOutOfPhase => "query-out-of-phase",
            Rule::ModeDiscipline => "mode-discipline",
            Rule::TimestampOrder => "timestamp-order",
            Rule::SnapshotNotReady => "snapshot-not-ready",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("message {index}: {rule}: {detail}")]
pub struct Violation {
    pub index: usize,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SessionState {
    Idle,
    Greeted,
    Streaming,
    Draining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueryPhase {
    Launched,
    Encoded,
    Answering,
    Done,
}

#[derive(Debug, Clone, Copy)]
struct FrameState {
    t_emit: f64,
    t_done: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct QueryState {
    phase: QueryPhase,
    t0: f64,
    t1: f64,
    last_t: f64,
}

/// Incremental protocol checker. Feed every message in wire order, both
/// directions interleaved as observed.
///
/// Cross-party timestamp checks (t_done >= t_emit, t1 >= t0, snapshot
/// readiness) only apply when the hello config declares `clock = virtual`,
/// because under a wall clock each side reads its own clock.
#[derive(Debug)]
pub struct ProtocolMachine {
    state: SessionState,
    mode: Mode,
    shared_timeline: bool,
    frames: HashMap<u64, FrameState>,
    queries: HashMap<String, QueryState>,
    index: usize,
}

impl Default for ProtocolMachine {
    fn default() -> Self {
        ProtocolMachine {
            state: SessionState::Idle,
            mode: Mode::Native,
            shared_timeline: false,
            frames: HashMap::new(),
            queries: HashMap::new(),
            index: 0,
        }
    }
}

impl ProtocolMachine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of messages accepted so far.
    pub fn position(&self) -> usize {
        self.index
    }

    pub fn is_closed(&self) -> bool {
        self.state == SessionState::Draining
    }

    pub fn step(&mut self, msg: &Message) -> Result<(), Violation> {
        let index = self.index;
        let fail = |rule: Rule, detail: String| Violation {
            index,
            rule,
            detail,
        };
        self.check(msg)
            .map_err(|(rule, detail)| fail(rule, detail))?;
        self.index += 1;
        Ok(())
    }

    fn require_streaming(&self, msg: &Message) -> Result<(), (Rule, String)> {
        let ok = match msg.direction() {
            Direction::ToWorker => self.state == SessionState::Streaming,
            Direction::ToHarness => {
                matches!(self.state, SessionState::Streaming | SessionState::Draining)
            }
        };
        if ok {
            Ok(())
        } else {
            Err((
                Rule::NotStreaming,
                format!("`{}` not allowed in state {:?}", msg.tag(), self.state),
            ))
        }
    }

    fn query_mut(&mut self, id: &str) -> Result<&mut QueryState, (Rule, String)> {
        self.queries.get_mut(id).ok_or_else(|| {
            (
                Rule::UnknownQuery,
                format!("query `{id}` was never launched"),
            )
        })
    }

    fn check(&mut self, msg: &Message) -> Result<(), (Rule, String)> {
        if self.state == SessionState::Idle {
            return match msg {
                Message::Hello(h) => {
                    if h.mode == Mode::Adapter && h.capacity_tokens.is_none() {
                        return Err((
                            Rule::ModeDiscipline,
                            "adapter-mode hello must carry capacity_tokens".into(),
                        ));
                    }
                    self.mode = h.mode;
                    self.shared_timeline =
                        h.config.get("clock").map(String::as_str) == Some("virtual");
                    self.state = SessionState::Greeted;
                    Ok(())
                }
                other => Err((
                    Rule::ExpectedHello,
                    format!("session starts with `{}`", other.tag()),
                )),
            };
        }

        match msg {
            Message::Hello(_) => Err((Rule::DuplicateHello, "hello sent twice".into())),
            Message::HelloAck(_) => {
                if self.state != SessionState::Greeted {
                    return Err((
                        Rule::UnexpectedHelloAck,
                        format!("hello_ack in state {:?}", self.state),
                    ));
                }
                self.state = SessionState::Streaming;
                Ok(())
            }
            Message::WorkerError(_) => Ok(()),
            Message::Shutdown => match self.state {
                SessionState::Draining => {
                    Err((Rule::DuplicateShutdown, "shutdown sent twice".into()))
                }
                _ => {
                    self.state = SessionState::Draining;
                    Ok(())
                }
            },
            Message::Frame(f) => {
                self.require_streaming(msg)?;
                if self.frames.contains_key(&f.frame_id) {
                    return Err((
                        Rule::DuplicateFrame,
                        format!("frame {} sent twice", f.frame_id),
                    ));
                }
                self.frames.insert(
                    f.frame_id,
                    FrameState {
                        t_emit: f.t_emit,
                        t_done: None,
                    },
                );
                Ok(())
            }
            Message::FrameEncoded(e) => {
                self.require_streaming(msg)?;
                if self.mode == Mode::Adapter && e.token_count.is_none() {
                    return Err((
                        Rule::ModeDiscipline,
                        format!(
                            "adapter-mode frame_encoded {} lacks token_count",
                            e.frame_id
                        ),
                    ));
                }
                let shared = self.shared_timeline;
                let frame = self.frames.get_mut(&e.frame_id).ok_or_else(|| {
                    (
                        Rule::UnknownFrame,
                        format!("frame {} was never sent", e.frame_id),
                    )
                })?;
                if frame.t_done.is_some() {
                    return Err((
                        Rule::DuplicateFrameEncoded,
                        format!("frame {} encoded twice", e.frame_id),
                    ));
                }
                if shared && e.t_done < frame.t_emit {
                    return Err((
                        Rule::TimestampOrder,
                        format!(
                            "frame {} done at {} before emit at {}",
                            e.frame_id, e.t_done, frame.t_emit
                        ),
                    ));
                }
                frame.t_done = Some(e.t_done);
                Ok(())
            }
            Message::QueryLaunch(q) => {
                self.require_streaming(msg)?;
                if self.queries.contains_key(&q.query_id) {
                    return Err((
                        Rule::DuplicateQuery,
                        format!("query `{}` launched twice", q.query_id),
                    ));
                }
                self.queries.insert(
                    q.query_id.clone(),
                    QueryState {
                        phase: QueryPhase::Launched,
                        t0: q.t0,
                        t1: q.t0,
                        last_t: q.t0,
                    },
                );
                Ok(())
            }
            Message::QueryEncoded(e) => {
                self.require_streaming(msg)?;
                let shared = self.shared_timeline;
                let q = self.query_mut(&e.query_id)?;
                if q.phase != QueryPhase::Launched {
                    return Err((
                        Rule::QueryOutOfPhase,
                        format!("query_encoded for `{}` in phase {:?}", e.query_id, q.phase),
                    ));
                }
                if shared && e.t1 < q.t0 {
                    return Err((
                        Rule::TimestampOrder,
                        format!(
                            "query `{}` encoded at {} before launch at {}",
                            e.query_id, e.t1, q.t0
                        ),
                    ));
                }
                q.phase = QueryPhase::Encoded;
                q.t1 = e.t1;
                q.last_t = e.t1;
                Ok(())
            }
            Message::Query(d) => {
                self.require_streaming(msg)?;
                match (self.mode, &d.snapshot_frame_ids) {
                    (Mode::Adapter, None) => {
                        return Err((
                            Rule::ModeDiscipline,
                            format!(
                                "adapter-mode query `{}` lacks snapshot_frame_ids",
                                d.query_id
                            ),
                        ))
                    }
                    (Mode::Native, Some(_)) => {
                        return Err((
                            Rule::ModeDiscipline,
                            format!(
                                "native-mode query `{}` carries snapshot_frame_ids",
                                d.query_id
                            ),
                        ))
                    }
                    _ => {}
                }
                let shared = self.shared_timeline;
                let q = *self.query_mut(&d.query_id)?;
                if q.phase != QueryPhase::Encoded {
                    return Err((
                        Rule::QueryOutOfPhase,
                        format!("query `{}` dispatched in phase {:?}", d.query_id, q.phase),
                    ));
                }
                for id in d.snapshot_frame_ids.iter().flatten() {
                    let ready = match self.frames.get(id).and_then(|f| f.t_done) {
                        Some(t_done) => !shared || t_done <= q.t1,
                        None => false,
                    };
                    if !ready {
                        return Err((
                            Rule::SnapshotNotReady,
                            format!(
                                "snapshot of `{}` names frame {id} not encoded by t1",
                                d.query_id
                            ),
                        ));
                    }
                }
                self.query_mut(&d.query_id)?.phase = QueryPhase::Answering;
                Ok(())
            }
            Message::Token(t) => {
                self.require_streaming(msg)?;
                let q = self.query_mut(&t.query_id)?;
                if q.phase != QueryPhase::Answering {
                    return Err((
                        Rule::QueryOutOfPhase,
                        format!("token for `{}` in phase {:?}", t.query_id, q.phase),
                    ));
                }
                if t.t < q.last_t {
                    return Err((
                        Rule::TimestampOrder,
                        format!(
                            "token for `{}` at {} precedes {}",
                            t.query_id, t.t, q.last_t
                        ),
                    ));
                }
                q.last_t = t.t;
                Ok(())
            }
            Message::AnswerDone(a) => {
                self.require_streaming(msg)?;
                let q = self.query_mut(&a.query_id)?;
                if q.phase != QueryPhase::Answering {
                    return Err((
                        Rule::QueryOutOfPhase,
                        format!("answer_done for `{}` in phase {:?}", a.query_id, q.phase),
                    ));
                }
                if a.t_last < q.last_t {
                    return Err((
                        Rule::TimestampOrder,
                        format!(
                            "answer `{}` done at {} before {}",
                            a.query_id, a.t_last, q.last_t
                        ),
                    ));
                }
                q.phase = QueryPhase::Done;
                q.last_t = a.t_last;
                Ok(())
            }
        }
    }
}

/// Replays the state machine over `messages`; returns the first violation.
pub fn validate_sequence<'a, I>(messages: I) -> Result<(), Violation>
where
    I: IntoIterator<Item = &'a Message>,
{
    let mut m = ProtocolMachine::new();
    messages.into_iter().try_for_each(|msg| m.step(msg))
}
