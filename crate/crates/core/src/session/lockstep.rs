//! Virtual-clock session driver.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::*;
use crate::protocol::{Frame, ProtocolMachine, QueryLaunch};
use crate::time::{Clock, VirtualClock};

/// Checked, recorded message channel.
struct Wire {
    link: WorkerLink,
    fsm: ProtocolMachine,
    transcript: Vec<Message>,
}

impl Wire {
    fn send(&mut self, msg: Message) -> Result<(), AbortReason> {
        self.fsm.step(&msg)?;
        self.link.send(&msg)?;
        self.transcript.push(msg);
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, AbortReason> {
        let msg = self.link.recv()?;
        self.fsm.step(&msg)?;
        self.transcript.push(msg.clone());
        if let Message::WorkerError(e) = msg {
            return Err(AbortReason::Worker {
                code: e.code,
                detail: e.detail,
            });
        }
        Ok(msg)
    }
}

fn unexpected(expected: impl Into<String>, got: &Message) -> AbortReason {
    AbortReason::UnexpectedReply {
        expected: expected.into(),
        got: got.tag().into(),
    }
}

/// Worker-reported seconds as a timestamp.
fn at(secs: f64) -> Result<Timestamp, AbortReason> {
    Timestamp::from_secs_f64(secs).map_err(|e| AbortReason::Causality(e.to_string()))
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Step {
    // Declaration order is the tie-break at equal times.
    Frame,
    Dispatch,
    Launch,
}

struct Driver<'a> {
    config: &'a SessionConfig,
    plan: &'a SessionPlan,
    wire: Wire,
    clock: VirtualClock,
    events: Vec<SessionEvent>,
    bank: Option<MemoryBank>,
    /// Encode-completion times of frames still pending at the last emission.
    pending: BinaryHeap<Reverse<Timestamp>>,
    turns: Vec<Turn>,
    worker: Option<HelloAck>,
}

impl Driver<'_> {
    fn handshake(&mut self) -> Result<(), AbortReason> {
        self.wire.send(self.config.hello())?;
        match self.wire.recv()? {
            Message::HelloAck(ack) => {
                self.worker = Some(ack);
                Ok(())
            }
            other => Err(unexpected("hello_ack", &other)),
        }
    }

    fn run(&mut self) -> Result<(), AbortReason> {
        self.handshake()?;
        let emits = self.plan.stream.schedule.emit_times();
        let queries = &self.plan.queries;
        let mut next_frame = 0usize;
        let mut next_query = 0usize;
        let mut in_flight: Option<Timestamp> = None;
        let mut lane_free = Timestamp::ZERO;

        loop {
            let mut candidates = Vec::with_capacity(3);
            if let Some(&t) = emits.get(next_frame) {
                candidates.push((t, Step::Frame));
            }
            match in_flight {
                Some(t1) => candidates.push((t1, Step::Dispatch)),
                None => {
                    if let Some(q) = queries.get(next_query) {
                        candidates.push((q.t0.max(lane_free), Step::Launch));
                    }
                }
            }
            let Some(&(t, step)) = candidates.iter().min() else {
                break;
            };
            self.clock
                .advance_to(t)
                .map_err(|e| AbortReason::Causality(e.to_string()))?;
            match step {
                Step::Frame => {
                    self.frame(next_frame, t)?;
                    next_frame += 1;
                }
                Step::Launch => {
                    in_flight = Some(self.launch(&queries[next_query])?);
                }
                Step::Dispatch => {
                    lane_free = self.answer(&queries[next_query], t)?;
                    in_flight = None;
                    next_query += 1;
                }
            }
        }
        self.wire.send(Message::Shutdown)
    }

    fn frame(&mut self, index: usize, t_emit: Timestamp) -> Result<(), AbortReason> {
        let frame_id = index as u64;
        self.events.push(SessionEvent::new(
            t_emit,
            EventKind::FrameEmitted { frame_id },
        ));
        self.wire.send(Message::Frame(Frame {
            frame_id,
            t_emit: t_emit.as_secs_f64(),
            payload_ref: self.plan.stream.payloads[index].clone(),
        }))?;
        let enc = match self.wire.recv()? {
            Message::FrameEncoded(e) if e.frame_id == frame_id => e,
            other => return Err(unexpected(format!("frame_encoded {frame_id}"), &other)),
        };
        let t_done = at(enc.t_done)?;
        self.events.push(SessionEvent::new(
            t_done,
            EventKind::FrameEncoded {
                frame_id,
                token_count: enc.token_count,
            },
        ));

        while self.pending.peek().is_some_and(|Reverse(d)| *d <= t_emit) {
            self.pending.pop();
        }
        if t_done > t_emit {
            self.pending.push(Reverse(t_done));
        }
        let depth = self.pending.len() as u64;
        self.events.push(SessionEvent::new(
            t_emit,
            EventKind::BacklogSample { depth },
        ));
        if depth > self.config.max_queue {
            return Err(AbortReason::QueueOverflow {
                depth,
                limit: self.config.max_queue,
            });
        }

        if let Some(bank) = self.bank.as_mut() {
            let ev = bank_write(bank, frame_id, enc.token_count, enc.handle, t_done)?;
            self.events.push(ev);
        }
        Ok(())
    }

    fn launch(&mut self, spec: &QuerySpec) -> Result<Timestamp, AbortReason> {
        self.events.push(launched_event(spec));
        self.wire.send(Message::QueryLaunch(QueryLaunch {
            query_id: spec.query_id.clone(),
            t0: spec.t0.as_secs_f64(),
            text: spec.text.clone(),
        }))?;
        match self.wire.recv()? {
            Message::QueryEncoded(e) if e.query_id == spec.query_id => at(e.t1),
            other => Err(unexpected(
                format!("query_encoded {}", spec.query_id),
                &other,
            )),
        }
    }

    /// Dispatches the encoded query and collects its answer. Returns the
    /// completion time.
    fn answer(&mut self, spec: &QuerySpec, t1: Timestamp) -> Result<Timestamp, AbortReason> {
        let snapshot = self.bank.as_ref().map(|b| b.snapshot(t1));
        let transcript = self
            .config
            .dialogue_context
            .then_some(self.turns.as_slice());
        let msg = dispatch_query(spec, t1, snapshot, transcript)?;
        self.events.push(SessionEvent::new(
            t1,
            EventKind::QueryEncoded {
                query_id: spec.query_id.clone(),
                snapshot: snapshot.map(|s| s.iter().map(|b| b.frame_id).collect()),
            },
        ));
        self.wire.send(msg)?;

        let mut first: Option<Timestamp> = None;
        loop {
            match self.wire.recv()? {
                Message::Token(tok) if tok.query_id == spec.query_id => {
                    if first.is_none() {
                        let t = at(tok.t)?;
                        first = Some(t);
                        self.events.push(SessionEvent::new(
                            t,
                            EventKind::FirstToken {
                                query_id: spec.query_id.clone(),
                            },
                        ));
                    }
                }
                Message::AnswerDone(done) if done.query_id == spec.query_id => {
                    let t_last = at(done.t_last)?;
                    if first.is_none() {
                        self.events.push(SessionEvent::new(
                            t_last,
                            EventKind::FirstToken {
                                query_id: spec.query_id.clone(),
                            },
                        ));
                    }
                    self.events.push(SessionEvent::new(
                        t_last,
                        EventKind::AnswerDone {
                            query_id: spec.query_id.clone(),
                            final_text: done.final_text.clone(),
                        },
                    ));
                    self.turns.push(Turn {
                        question: spec.text.clone(),
                        answer: done.final_text,
                    });
                    return Ok(t_last);
                }
                other => {
                    return Err(unexpected(
                        format!("token or answer_done for {}", spec.query_id),
                        &other,
                    ))
                }
            }
        }
    }

    fn outcome(self) -> SessionOutcome {
        let header = self.config.log_header(self.plan, self.worker.as_ref());
        SessionOutcome {
            log: EventLog::new(header, self.events),
            transcript: self.wire.transcript,
            worker: self.worker,
        }
    }
}

pub(super) fn run(
    config: &SessionConfig,
    plan: &SessionPlan,
    link: WorkerLink,
) -> Result<SessionOutcome, SessionError> {
    let mut driver = Driver {
        config,
        plan,
        wire: Wire {
            link,
            fsm: ProtocolMachine::new(),
            transcript: Vec::new(),
        },
        clock: VirtualClock::new(),
        events: Vec::new(),
        bank: (config.mode == Mode::Adapter)
            .then(|| MemoryBank::new(config.capacity_tokens().expect("validated"))),
        pending: BinaryHeap::new(),
        turns: Vec::new(),
        worker: None,
    };
    match driver.run() {
        Ok(()) => Ok(driver.outcome()),
        Err(reason) => {
            // Best effort: let the worker wind down.
            let _ = driver.wire.send(Message::Shutdown);
            let now = driver.clock.now();
            driver.events.push(SessionEvent::new(
                now,
                EventKind::SessionAborted {
                    reason: reason.to_string(),
                },
            ));
            Err(SessionError::Aborted {
                reason,
                partial: Box::new(driver.outcome()),
            })
        }
    }
}
