//! Deterministic protocol-speaking worker for desk-scale runs.
//!
//! The mock has one serial frame encoder and one serial query lane. Under a
//! virtual clock it computes every reply timestamp from the logical times the
//! harness sends:
//!
//! ```text
//! frame:  t_done = max(t_emit, previous t_done) + encode_cost
//! query:  t1     = max(t0, previous t_last) + query_encode_cost
//!         first  = t1 + first_token_delay
//!         t_last = first + (answer_len - 1) * inter_token
//! ```
//!
//! With `overlap_encode_and_decode = false` both lanes share a single unit,
//! so frames queue behind query work and vice versa (in arrival order).
//! Its sustainable frame rate is exactly `1 / encode_cost`.
//!
//! Under a wall clock the same costs are slept on real threads.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    AnswerDone, AnswerOption, FrameEncoded, HelloAck, LinkError, Message, MessageSink,
    MessageSource, Mode, QueryEncoded, Token, WorkerError, WorkerLink,
};
use crate::time::{Clock, Duration, Timestamp, WallClock};

pub const MOCK_WORKER_NAME: &str = "streameval-mock";

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid mock config: {0}")]
    Config(String),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("expected hello, got `{0}`")]
    NoHello(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerPolicy {
    /// Answer with the gold label from the answer key.
    Oracle,
    /// Always answer with this label.
    Fixed(String),
    /// Pick uniformly among the query's option labels with a seeded RNG.
    UniformRandom(u64),
}

/// `oracle`, `fixed:<label>` or `random:<seed>`.
impl FromStr for AnswerPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "oracle" {
            return Ok(AnswerPolicy::Oracle);
        }
        if let Some(label) = s.strip_prefix("fixed:") {
            return Ok(AnswerPolicy::Fixed(label.to_string()));
        }
        if let Some(seed) = s.strip_prefix("random:") {
            return seed
                .parse()
                .map(AnswerPolicy::UniformRandom)
                .map_err(|_| format!("bad seed in `{s}`"));
        }
        Err(format!(
            "unknown answer policy `{s}` (expected oracle, fixed:<label> or random:<seed>)"
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub encode_cost_s: f64,
    pub tokens_per_frame: u64,
    pub query_encode_cost_s: f64,
    pub first_token_delay_s: f64,
    pub inter_token_s: f64,
    pub answer_len_tokens: u64,
    pub answer_policy: AnswerPolicy,
    pub overlap_encode_and_decode: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            encode_cost_s: 0.0,
            tokens_per_frame: 64,
            query_encode_cost_s: 0.0,
            first_token_delay_s: 0.0,
            inter_token_s: 0.0,
            answer_len_tokens: 1,
            answer_policy: AnswerPolicy::Oracle,
            overlap_encode_and_decode: true,
        }
    }
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), MockError> {
        for (name, v) in [
            ("encode_cost_s", self.encode_cost_s),
            ("query_encode_cost_s", self.query_encode_cost_s),
            ("first_token_delay_s", self.first_token_delay_s),
            ("inter_token_s", self.inter_token_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MockError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.tokens_per_frame == 0 {
            return Err(MockError::Config("tokens_per_frame must be >= 1".into()));
        }
        if self.answer_len_tokens == 0 {
            return Err(MockError::Config("answer_len_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses a TOML table with the field names above. Missing keys take
    /// their defaults.
    pub fn from_toml(text: &str) -> Result<Self, MockError> {
        let cfg: MockConfig = toml::from_str(text).map_err(|e| MockError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn costs(&self) -> Costs {
        let d = |s: f64| Duration::from_secs_f64(s).expect("validated");
        Costs {
            encode: d(self.encode_cost_s),
            query_encode: d(self.query_encode_cost_s),
            first_token: d(self.first_token_delay_s),
            inter_token: d(self.inter_token_s),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Costs {
    encode: Duration,
    query_encode: Duration,
    first_token: Duration,
    inter_token: Duration,
}

struct AnswerPicker {
    policy: AnswerPolicy,
    answer_key: BTreeMap<String, String>,
    rng: ChaCha8Rng,
    len: u64,
}

impl AnswerPicker {
    fn new(config: &MockConfig, answer_key: BTreeMap<String, String>) -> Self {
        let seed = match config.answer_policy {
            AnswerPolicy::UniformRandom(seed) => seed,
            _ => 0,
        };
        AnswerPicker {
            policy: config.answer_policy.clone(),
            answer_key,
            rng: ChaCha8Rng::seed_from_u64(seed),
            len: config.answer_len_tokens,
        }
    }

    fn label(&mut self, query_id: &str, options: &[AnswerOption]) -> String {
        match &self.policy {
            AnswerPolicy::Oracle => match self.answer_key.get(query_id) {
                Some(gold) => gold.clone(),
                None => {
                    log::warn!("mock: no answer key entry for `{query_id}`");
                    options.first().map(|o| o.label.clone()).unwrap_or_default()
                }
            },
            AnswerPolicy::Fixed(label) => label.clone(),
            AnswerPolicy::UniformRandom(_) => {
                if options.is_empty() {
                    String::new()
                } else {
                    options[self.rng.random_range(0..options.len())]
                        .label
                        .clone()
                }
            }
        }
    }

    /// Answer pieces: the label followed by `len - 1` filler pieces.
    fn pieces(&mut self, query_id: &str, options: &[AnswerOption]) -> Vec<String> {
        let mut pieces = vec![self.label(query_id, options)];
        pieces.extend((1..self.len).map(|_| ".".to_string()));
        pieces
    }
}

fn hello_ack() -> Message {
    Message::HelloAck(HelloAck {
        worker_name: MOCK_WORKER_NAME.into(),
        capabilities: ["native", "adapter", "virtual-clock", "wall-clock"]
            .map(String::from)
            .to_vec(),
    })
}

fn bad_input(detail: String) -> Message {
    Message::WorkerError(WorkerError {
        code: "bad-input".into(),
        detail,
        frame_id: None,
        query_id: None,
    })
}

fn secs(t: Timestamp) -> f64 {
    t.as_secs_f64()
}

fn ts(s: f64) -> Timestamp {
    Timestamp::from_secs_f64(s).unwrap_or(Timestamp::ZERO)
}

#[derive(Debug, Clone, Copy)]
struct Plan {
    first_token: Timestamp,
}

/// Virtual-clock mock: a pure function from incoming messages to replies.
pub struct MockWorker {
    config: MockConfig,
    costs: Costs,
    picker: AnswerPicker,
    mode: Mode,
    encode_free: Timestamp,
    query_free: Timestamp,
    plans: HashMap<String, Plan>,
}

impl MockWorker {
    pub fn new(config: MockConfig) -> Result<Self, MockError> {
        Self::with_answer_key(config, BTreeMap::new())
    }

    pub fn with_answer_key(
        config: MockConfig,
        answer_key: BTreeMap<String, String>,
    ) -> Result<Self, MockError> {
        config.validate()?;
        Ok(MockWorker {
            costs: config.costs(),
            picker: AnswerPicker::new(&config, answer_key),
            config,
            mode: Mode::Native,
            encode_free: Timestamp::ZERO,
            query_free: Timestamp::ZERO,
            plans: HashMap::new(),
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn overlap(&self) -> bool {
        self.config.overlap_encode_and_decode
    }

    /// Replies to one message. `Shutdown` yields no reply.
    pub fn handle(&mut self, msg: Message) -> Vec<Message> {
        match msg {
            Message::Hello(h) => {
                self.mode = h.mode;
                vec![hello_ack()]
            }
            Message::Frame(f) => {
                let start = ts(f.t_emit).max(self.encode_free);
                let done = start.saturating_add(self.costs.encode);
                self.encode_free = done;
                if !self.overlap() {
                    self.query_free = done;
                }
                vec![Message::FrameEncoded(FrameEncoded {
                    frame_id: f.frame_id,
                    t_done: secs(done),
                    token_count: (self.mode == Mode::Adapter)
                        .then_some(self.config.tokens_per_frame),
                    handle: Some(format!("mock://frame/{}", f.frame_id)),
                })]
            }
            Message::QueryLaunch(q) => {
                let start = ts(q.t0).max(self.query_free);
                let t1 = start.saturating_add(self.costs.query_encode);
                let first_token = t1.saturating_add(self.costs.first_token);
                let t_last = first_token.saturating_add(
                    self.costs
                        .inter_token
                        .saturating_mul(self.config.answer_len_tokens - 1),
                );
                self.query_free = t_last;
                if !self.overlap() {
                    self.encode_free = t_last;
                }
                self.plans.insert(q.query_id.clone(), Plan { first_token });
                vec![Message::QueryEncoded(QueryEncoded {
                    query_id: q.query_id,
                    t1: secs(t1),
                })]
            }
            Message::Query(q) => {
                let Some(plan) = self.plans.remove(&q.query_id) else {
                    return vec![Message::WorkerError(WorkerError {
                        code: "unknown-query".into(),
                        detail: format!("query `{}` was not launched", q.query_id),
                        frame_id: None,
                        query_id: Some(q.query_id),
                    })];
                };
                let pieces = self.picker.pieces(&q.query_id, &q.options);
                let mut t = plan.first_token;
                let mut out = Vec::with_capacity(pieces.len() + 1);
                for (k, piece) in pieces.iter().enumerate() {
                    if k > 0 {
                        t = t.saturating_add(self.costs.inter_token);
                    }
                    out.push(Message::Token(Token {
                        query_id: q.query_id.clone(),
                        t: secs(t),
                        text_piece: piece.clone(),
                    }));
                }
                out.push(Message::AnswerDone(AnswerDone {
                    query_id: q.query_id,
                    t_last: secs(t),
                    final_text: pieces.concat(),
                }));
                out
            }
            Message::Shutdown => Vec::new(),
            other => vec![bad_input(format!(
                "unexpected `{}` from harness",
                other.tag()
            ))],
        }
    }

    /// Wraps the mock as an in-process link: every send is answered
    /// synchronously, and replies are read back through the wire codec.
    pub fn into_link(self) -> WorkerLink {
        let replies = Arc::new(Mutex::new(std::collections::VecDeque::new()));
        let sink = InProcessSink {
            worker: self,
            replies: Arc::clone(&replies),
        };
        WorkerLink::new(Box::new(sink), Box::new(InProcessSource { replies }))
    }

    /// Serves a link until `Shutdown` or end of stream. The clock comes from
    /// the hello config (`clock = wall` sleeps real time; anything else is
    /// virtual).
    pub fn serve(self, link: WorkerLink) -> Result<(), MockError> {
        let (mut sink, mut source) = link.split();
        let hello = loop {
            match source.recv() {
                Ok(Message::Hello(h)) => break h,
                Ok(other) => return Err(MockError::NoHello(other.tag())),
                Err(LinkError::Decode(e)) => sink.send(&bad_input(e.to_string()))?,
                Err(e) => return Err(e.into()),
            }
        };
        if hello.config.get("clock").map(String::as_str) == Some("wall") {
            return serve_wall(self.config, self.picker, hello.mode, sink, source);
        }
        let mut worker = self;
        for reply in worker.handle(Message::Hello(hello)) {
            sink.send(&reply)?;
        }
        loop {
            let msg = match source.recv() {
                Ok(m) => m,
                Err(LinkError::Decode(e)) => {
                    sink.send(&bad_input(e.to_string()))?;
                    continue;
                }
                Err(LinkError::Closed) => return Ok(()),
                Err(e) => return Err(e.into()),
            };
            let stop = msg == Message::Shutdown;
            for reply in worker.handle(msg) {
                sink.send(&reply)?;
            }
            if stop {
                return Ok(());
            }
        }
    }
}

type SharedReplies = Arc<Mutex<std::collections::VecDeque<String>>>;

struct InProcessSink {
    worker: MockWorker,
    replies: SharedReplies,
}

impl MessageSink for InProcessSink {
    fn send_line(&mut self, line: &str) -> Result<(), LinkError> {
        let replies = match crate::protocol::decode_message(line) {
            Ok(msg) => self.worker.handle(msg),
            Err(e) => vec![bad_input(e.to_string())],
        };
        let mut q = self.replies.lock().expect("reply queue poisoned");
        q.extend(replies.iter().map(crate::protocol::encode_message));
        Ok(())
    }
}

struct InProcessSource {
    replies: SharedReplies,
}

impl MessageSource for InProcessSource {
    fn recv(&mut self) -> Result<Message, LinkError> {
        let line = self
            .replies
            .lock()
            .expect("reply queue poisoned")
            .pop_front()
            .ok_or(LinkError::Closed)?;
        Ok(crate::protocol::decode_message(&line)?)
    }
}

enum QueryWork {
    Launch(String),
    Answer(String, Vec<AnswerOption>),
}

fn serve_wall(
    config: MockConfig,
    mut picker: AnswerPicker,
    mode: Mode,
    mut sink: Box<dyn MessageSink>,
    mut source: Box<dyn MessageSource>,
) -> Result<(), MockError> {
    let clock = WallClock::start();
    let costs = config.costs();
    sink.send(&hello_ack())?;
    let sink = Arc::new(Mutex::new(sink));
    // Held while doing work when encode and decode may not overlap.
    let unit = Arc::new(Mutex::new(()));
    let overlap = config.overlap_encode_and_decode;

    let (frame_tx, frame_rx) = channel::<u64>();
    let (query_tx, query_rx) = channel::<QueryWork>();

    let encoder = {
        let sink = Arc::clone(&sink);
        let unit = Arc::clone(&unit);
        let tokens = config.tokens_per_frame;
        thread::spawn(move || -> Result<(), LinkError> {
            for frame_id in frame_rx {
                {
                    let _guard = (!overlap).then(|| unit.lock().expect("unit poisoned"));
                    thread::sleep(costs.encode.to_std());
                }
                let msg = Message::FrameEncoded(FrameEncoded {
                    frame_id,
                    t_done: clock.now().as_secs_f64(),
                    token_count: (mode == Mode::Adapter).then_some(tokens),
                    handle: Some(format!("mock://frame/{frame_id}")),
                });
                sink.lock().expect("sink poisoned").send(&msg)?;
            }
            Ok(())
        })
    };

    let responder = {
        let sink = Arc::clone(&sink);
        let unit = Arc::clone(&unit);
        thread::spawn(move || -> Result<(), LinkError> {
            answer_queries(query_rx, &sink, &unit, overlap, costs, &mut picker, clock)
        })
    };

    let result = loop {
        match source.recv() {
            Ok(Message::Frame(f)) => {
                let _ = frame_tx.send(f.frame_id);
            }
            Ok(Message::QueryLaunch(q)) => {
                let _ = query_tx.send(QueryWork::Launch(q.query_id));
            }
            Ok(Message::Query(q)) => {
                let _ = query_tx.send(QueryWork::Answer(q.query_id, q.options));
            }
            Ok(Message::Shutdown) | Err(LinkError::Closed) => break Ok(()),
            Ok(other) => {
                let msg = bad_input(format!("unexpected `{}` from harness", other.tag()));
                sink.lock().expect("sink poisoned").send(&msg)?;
            }
            Err(LinkError::Decode(e)) => {
                sink.lock()
                    .expect("sink poisoned")
                    .send(&bad_input(e.to_string()))?;
            }
            Err(e) => break Err(e),
        }
    };
    drop(frame_tx);
    drop(query_tx);
    let enc = encoder.join().expect("encoder thread panicked");
    let resp = responder.join().expect("responder thread panicked");
    result?;
    // The harness may hang up before draining; that is not a worker fault.
    for r in [enc, resp] {
        match r {
            Ok(()) | Err(LinkError::Closed) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn answer_queries(
    rx: Receiver<QueryWork>,
    sink: &Mutex<Box<dyn MessageSink>>,
    unit: &Mutex<()>,
    overlap: bool,
    costs: Costs,
    picker: &mut AnswerPicker,
    clock: WallClock,
) -> Result<(), LinkError> {
    let send = |m: Message| sink.lock().expect("sink poisoned").send(&m);
    for work in rx {
        match work {
            QueryWork::Launch(query_id) => {
                {
                    let _guard = (!overlap).then(|| unit.lock().expect("unit poisoned"));
                    thread::sleep(costs.query_encode.to_std());
                }
                send(Message::QueryEncoded(QueryEncoded {
                    query_id,
                    t1: clock.now().as_secs_f64(),
                }))?;
            }
            QueryWork::Answer(query_id, options) => {
                let _guard = (!overlap).then(|| unit.lock().expect("unit poisoned"));
                let pieces = picker.pieces(&query_id, &options);
                let mut t = clock.now();
                for (k, piece) in pieces.iter().enumerate() {
                    let wait = if k == 0 {
                        costs.first_token
                    } else {
                        costs.inter_token
                    };
                    thread::sleep(wait.to_std());
                    t = clock.now();
                    send(Message::Token(Token {
                        query_id: query_id.clone(),
                        t: t.as_secs_f64(),
                        text_piece: piece.clone(),
                    }))?;
                }
                send(Message::AnswerDone(AnswerDone {
                    query_id,
                    t_last: t.as_secs_f64(),
                    final_text: pieces.concat(),
                }))?;
            }
        }
    }
    Ok(())
}
