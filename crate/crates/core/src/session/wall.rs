//! Wall-clock session driver.
//!
//! Three threads share the link: an emitter sends frames at their scheduled
//! times, a launcher sends query launches (each after the previous answer
//! completes), and the calling thread handles every worker reply. A fourth
//! thread only pumps the worker's output into a channel so the handler can
//! also be woken by aborts from the other two.
//!
//! The state machine is stepped and the message sent under one lock, so the
//! checked transcript is causally ordered even though sends come from
//! several threads.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use super::*;
use crate::protocol::{Frame, MessageSink, MessageSource, ProtocolMachine, QueryLaunch};
use crate::time::{Clock, WallClock};

/// Longest uninterrupted sleep, so aborts are noticed promptly.
const SLEEP_SLICE: std::time::Duration = std::time::Duration::from_millis(20);

struct WireOut {
    sink: Box<dyn MessageSink>,
    fsm: ProtocolMachine,
    transcript: Vec<Message>,
}

impl WireOut {
    fn send(&mut self, msg: Message) -> Result<(), AbortReason> {
        self.fsm.step(&msg)?;
        self.sink.send(&msg)?;
        self.transcript.push(msg);
        Ok(())
    }

    fn accept(&mut self, msg: &Message) -> Result<(), AbortReason> {
        self.fsm.step(msg)?;
        self.transcript.push(msg.clone());
        Ok(())
    }
}

enum Input {
    Wire(Result<Message, LinkError>),
    Abort(AbortReason),
}

struct Shared {
    clock: WallClock,
    wire: Mutex<WireOut>,
    events: Mutex<Vec<SessionEvent>>,
    emitted: AtomicU64,
    encoded: AtomicU64,
    stop: AtomicBool,
}

impl Shared {
    fn record(&self, event: SessionEvent) {
        self.events.lock().expect("events poisoned").push(event);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Sleeps until `t`; returns false if the session stopped meanwhile.
    fn sleep_until(&self, t: Timestamp) -> bool {
        loop {
            if self.stopped() {
                return false;
            }
            let now = self.clock.now();
            if now >= t {
                return true;
            }
            let left = t.checked_since(now).map(|d| d.to_std()).unwrap_or_default();
            thread::sleep(left.min(SLEEP_SLICE));
        }
    }
}

fn emit_frames(shared: &Shared, plan: &SessionPlan, max_queue: u64, inbox: &Sender<Input>) {
    for (i, &t) in plan.stream.schedule.emit_times().iter().enumerate() {
        if !shared.sleep_until(t) {
            return;
        }
        let frame_id = i as u64;
        let sent = {
            let mut wire = shared.wire.lock().expect("wire poisoned");
            let now = shared.clock.now();
            wire.send(Message::Frame(Frame {
                frame_id,
                t_emit: now.as_secs_f64(),
                payload_ref: plan.stream.payloads[i].clone(),
            }))
            .map(|()| now)
        };
        let now = match sent {
            Ok(now) => now,
            Err(reason) => {
                let _ = inbox.send(Input::Abort(reason));
                return;
            }
        };
        let emitted = shared.emitted.fetch_add(1, Ordering::SeqCst) + 1;
        let depth = emitted.saturating_sub(shared.encoded.load(Ordering::SeqCst));
        shared.record(SessionEvent::new(now, EventKind::FrameEmitted { frame_id }));
        shared.record(SessionEvent::new(now, EventKind::BacklogSample { depth }));
        if depth > max_queue {
            let _ = inbox.send(Input::Abort(AbortReason::QueueOverflow {
                depth,
                limit: max_queue,
            }));
            return;
        }
    }
}

fn launch_queries(shared: &Shared, plan: &SessionPlan, done: Receiver<()>, inbox: &Sender<Input>) {
    for (k, spec) in plan.queries.iter().enumerate() {
        if k > 0 && done.recv().is_err() {
            return;
        }
        if !shared.sleep_until(spec.t0) {
            return;
        }
        let sent = shared
            .wire
            .lock()
            .expect("wire poisoned")
            .send(Message::QueryLaunch(QueryLaunch {
                query_id: spec.query_id.clone(),
                t0: spec.t0.as_secs_f64(),
                text: spec.text.clone(),
            }));
        if let Err(reason) = sent {
            let _ = inbox.send(Input::Abort(reason));
            return;
        }
        shared.record(launched_event(spec));
    }
}

struct Handler<'a> {
    config: &'a SessionConfig,
    plan: &'a SessionPlan,
    shared: &'a Shared,
    bank: Option<MemoryBank>,
    queries: HashMap<&'a str, &'a QuerySpec>,
    first_seen: HashMap<String, Timestamp>,
    turns: Vec<Turn>,
    answered: usize,
    done: Sender<()>,
}

impl Handler<'_> {
    fn finished(&self) -> bool {
        self.shared.encoded.load(Ordering::SeqCst) == self.plan.stream.len() as u64
            && self.answered == self.plan.queries.len()
    }

    fn handle(&mut self, msg: Message) -> Result<(), AbortReason> {
        let now = self.shared.clock.now();
        self.shared
            .wire
            .lock()
            .expect("wire poisoned")
            .accept(&msg)?;
        match msg {
            Message::FrameEncoded(e) => {
                self.shared.record(SessionEvent::new(
                    now,
                    EventKind::FrameEncoded {
                        frame_id: e.frame_id,
                        token_count: e.token_count,
                    },
                ));
                self.shared.encoded.fetch_add(1, Ordering::SeqCst);
                if let Some(bank) = self.bank.as_mut() {
                    let ev = bank_write(bank, e.frame_id, e.token_count, e.handle, now)?;
                    self.shared.record(ev);
                }
            }
            Message::QueryEncoded(e) => {
                let spec = self
                    .queries
                    .get(e.query_id.as_str())
                    .copied()
                    .ok_or_else(|| AbortReason::UnexpectedReply {
                        expected: "a launched query".into(),
                        got: format!("query_encoded {}", e.query_id),
                    })?;
                let snapshot = self.bank.as_ref().map(|b| b.snapshot(now));
                let transcript = self
                    .config
                    .dialogue_context
                    .then_some(self.turns.as_slice());
                let query = dispatch_query(spec, now, snapshot, transcript)?;
                self.shared.record(SessionEvent::new(
                    now,
                    EventKind::QueryEncoded {
                        query_id: e.query_id,
                        snapshot: snapshot.map(|s| s.iter().map(|b| b.frame_id).collect()),
                    },
                ));
                self.shared
                    .wire
                    .lock()
                    .expect("wire poisoned")
                    .send(query)?;
            }
            Message::Token(t) => {
                if !self.first_seen.contains_key(&t.query_id) {
                    self.first_seen.insert(t.query_id.clone(), now);
                    self.shared.record(SessionEvent::new(
                        now,
                        EventKind::FirstToken {
                            query_id: t.query_id,
                        },
                    ));
                }
            }
            Message::AnswerDone(a) => {
                if !self.first_seen.contains_key(&a.query_id) {
                    self.first_seen.insert(a.query_id.clone(), now);
                    self.shared.record(SessionEvent::new(
                        now,
                        EventKind::FirstToken {
                            query_id: a.query_id.clone(),
                        },
                    ));
                }
                if let Some(spec) = self.queries.get(a.query_id.as_str()) {
                    self.turns.push(Turn {
                        question: spec.text.clone(),
                        answer: a.final_text.clone(),
                    });
                }
                self.shared.record(SessionEvent::new(
                    now,
                    EventKind::AnswerDone {
                        query_id: a.query_id,
                        final_text: a.final_text,
                    },
                ));
                self.answered += 1;
                let _ = self.done.send(());
            }
            Message::WorkerError(e) => {
                return Err(AbortReason::Worker {
                    code: e.code,
                    detail: e.detail,
                })
            }
            other => return Err(unexpected_reply(&other)),
        }
        Ok(())
    }
}

fn unexpected_reply(msg: &Message) -> AbortReason {
    AbortReason::UnexpectedReply {
        expected: "a worker reply".into(),
        got: msg.tag().into(),
    }
}

fn handshake(
    config: &SessionConfig,
    sink: &mut Box<dyn MessageSink>,
    source: &mut Box<dyn MessageSource>,
    fsm: &mut ProtocolMachine,
    transcript: &mut Vec<Message>,
) -> Result<HelloAck, AbortReason> {
    let hello = config.hello();
    fsm.step(&hello)?;
    sink.send(&hello)?;
    transcript.push(hello);
    let reply = source.recv()?;
    fsm.step(&reply)?;
    transcript.push(reply.clone());
    match reply {
        Message::HelloAck(ack) => Ok(ack),
        Message::WorkerError(e) => Err(AbortReason::Worker {
            code: e.code,
            detail: e.detail,
        }),
        other => Err(AbortReason::UnexpectedReply {
            expected: "hello_ack".into(),
            got: other.tag().into(),
        }),
    }
}

pub(super) fn run(
    config: &SessionConfig,
    plan: &SessionPlan,
    link: WorkerLink,
) -> Result<SessionOutcome, SessionError> {
    let (mut sink, mut source) = link.split();
    let mut fsm = ProtocolMachine::new();
    let mut transcript = Vec::new();
    let handshake = handshake(config, &mut sink, &mut source, &mut fsm, &mut transcript);
    let shared = Arc::new(Shared {
        clock: WallClock::start(),
        wire: Mutex::new(WireOut {
            sink,
            fsm,
            transcript,
        }),
        events: Mutex::new(Vec::new()),
        emitted: AtomicU64::new(0),
        encoded: AtomicU64::new(0),
        stop: AtomicBool::new(false),
    });
    let ack = match handshake {
        Ok(ack) => ack,
        Err(reason) => return Err(abort(config, plan, &shared, None, reason)),
    };

    let (inbox_tx, inbox) = channel::<Input>();
    {
        // Not joined: it may block on a worker that never closes its output.
        let tx = inbox_tx.clone();
        thread::spawn(move || loop {
            let msg = source.recv();
            let last = msg.is_err();
            if tx.send(Input::Wire(msg)).is_err() || last {
                return;
            }
        });
    }
    let (done_tx, done_rx) = channel::<()>();

    let outcome = thread::scope(|scope| {
        let emitter = {
            let tx = inbox_tx.clone();
            let shared = &*shared;
            scope.spawn(move || emit_frames(shared, plan, config.max_queue, &tx))
        };
        let launcher = {
            let tx = inbox_tx.clone();
            let shared = &*shared;
            scope.spawn(move || launch_queries(shared, plan, done_rx, &tx))
        };

        let mut handler = Handler {
            config,
            plan,
            shared: &shared,
            bank: (config.mode == Mode::Adapter)
                .then(|| MemoryBank::new(config.capacity_tokens().expect("validated"))),
            queries: plan
                .queries
                .iter()
                .map(|q| (q.query_id.as_str(), q))
                .collect(),
            first_seen: HashMap::new(),
            turns: Vec::new(),
            answered: 0,
            done: done_tx,
        };
        let mut result = Ok(());
        while !handler.finished() {
            let step = match inbox.recv() {
                Ok(Input::Wire(Ok(msg))) => handler.handle(msg),
                Ok(Input::Wire(Err(e))) => Err(e.into()),
                Ok(Input::Abort(reason)) => Err(reason),
                Err(_) => Err(AbortReason::Link("all session inputs closed".into())),
            };
            if let Err(reason) = step {
                result = Err(reason);
                break;
            }
        }
        shared.stop.store(true, Ordering::SeqCst);
        drop(handler);
        let _ = emitter.join();
        let _ = launcher.join();
        result
    });

    match outcome.and_then(|()| {
        shared
            .wire
            .lock()
            .expect("wire poisoned")
            .send(Message::Shutdown)
    }) {
        Ok(()) => {
            let wire = shared.wire.lock().expect("wire poisoned");
            let events = std::mem::take(&mut *shared.events.lock().expect("events poisoned"));
            Ok(SessionOutcome {
                log: EventLog::new(config.log_header(plan, Some(&ack)), events),
                transcript: wire.transcript.clone(),
                worker: Some(ack),
            })
        }
        Err(reason) => Err(abort(config, plan, &shared, Some(ack), reason)),
    }
}

fn abort(
    config: &SessionConfig,
    plan: &SessionPlan,
    shared: &Shared,
    ack: Option<HelloAck>,
    reason: AbortReason,
) -> SessionError {
    shared.stop.store(true, Ordering::SeqCst);
    let mut wire = shared.wire.lock().expect("wire poisoned");
    if !wire.fsm.is_closed() {
        let _ = wire.send(Message::Shutdown);
    }
    let mut events = std::mem::take(&mut *shared.events.lock().expect("events poisoned"));
    events.push(SessionEvent::new(
        shared.clock.now(),
        EventKind::SessionAborted {
            reason: reason.to_string(),
        },
    ));
    SessionError::Aborted {
        reason,
        partial: Box::new(SessionOutcome {
            log: EventLog::new(config.log_header(plan, ack.as_ref()), events),
            transcript: wire.transcript.clone(),
            worker: ack,
        }),
    }
}
