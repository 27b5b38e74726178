//! Protocol conformance: a bundled message corpus and a scenario suite run
//! against a live worker.
//!
//! The corpus has three parts. `valid.jsonl` is one complete session whose
//! lines must decode, re-encode byte for byte and pass the state machine.
//! `invalid.tsv` pairs a malformed line with the exact decode error it must
//! produce. `sequences.jsonl` holds message blocks headed by
//! `# expect <rule> at <index>` (or `# expect valid`).

use std::fmt;
use std::process::Child;
use std::sync::mpsc;
use std::thread;
use std::time::Duration as StdDuration;

use crate::budget::{ByteBudget, ModelProfile};
use crate::metrics::FactoryError;
use crate::protocol::{
    decode_message, encode_message, validate_sequence, AnswerOption, Hello, Message, Mode,
    WorkerLink, PROTOCOL_VERSION,
};
use crate::session::{
    run_session, EventKind, QuerySpec, SessionConfig, SessionOutcome, SessionPlan, StreamPlan,
    SyntheticStream,
};
use crate::time::{ClockKind, Timestamp};

pub const VALID_CORPUS: &str = include_str!("../conformance/valid.jsonl");
pub const INVALID_CORPUS: &str = include_str!("../conformance/invalid.tsv");
pub const SEQUENCE_CORPUS: &str = include_str!("../conformance/sequences.jsonl");

/// Capability a worker advertises when it honours `clock=virtual`.
pub const VIRTUAL_CLOCK_CAPABILITY: &str = "virtual-clock";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: impl Into<String>, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: impl Into<String>, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed: false,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<String, String>) -> Self {
        match r {
            Ok(d) => CheckResult::pass(name, d),
            Err(d) => CheckResult::fail(name, d),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        if self.detail.is_empty() {
            write!(f, "{status} {}", self.name)
        } else {
            write!(f, "{status} {}: {}", self.name, self.detail)
        }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Every line decodes and re-encodes identically; the whole file is one
/// valid session.
pub fn check_valid_corpus(text: &str) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut messages = Vec::new();
    for (n, line) in data_lines(text) {
        let name = format!("valid:{n}");
        match decode_message(line) {
            Ok(msg) => {
                let again = encode_message(&msg);
                if again.trim_end_matches('\n') == line {
                    out.push(CheckResult::pass(name, ""));
                } else {
                    out.push(CheckResult::fail(
                        name,
                        format!("re-encoded as {}", again.trim_end()),
                    ));
                }
                messages.push(msg);
            }
            Err(e) => out.push(CheckResult::fail(name, format!("decode failed: {e}"))),
        }
    }
    out.push(CheckResult::from_result(
        "valid:session",
        validate_sequence(&messages)
            .map(|()| format!("{} messages", messages.len()))
            .map_err(|v| v.to_string()),
    ));
    out
}

/// Each `expected<TAB>line` row must fail with exactly `expected`.
pub fn check_invalid_corpus(tsv: &str) -> Vec<CheckResult> {
    data_lines(tsv)
        .map(|(n, row)| {
            let name = format!("invalid:{n}");
            let Some((expected, line)) = row.split_once('\t') else {
                return CheckResult::fail(name, "row lacks a tab separator");
            };
            match decode_message(line) {
                Ok(msg) => CheckResult::fail(name, format!("decoded as `{}`", msg.tag())),
                Err(e) if e.to_string() == expected => CheckResult::pass(name, expected),
                Err(e) => CheckResult::fail(name, format!("expected `{expected}`, got `{e}`")),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expectation {
    Valid,
    Violation { rule: String, index: usize },
}

fn parse_expectation(header: &str) -> Option<Expectation> {
    let rest = header.strip_prefix("# expect ")?.trim();
    if rest == "valid" {
        return Some(Expectation::Valid);
    }
    let (rule, index) = rest.split_once(" at ")?;
    Some(Expectation::Violation {
        rule: rule.trim().to_string(),
        index: index.trim().parse().ok()?,
    })
}

/// Replays each block through the state machine and compares the first
/// violation with the header.
pub fn check_sequence_corpus(text: &str) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut block: Option<(usize, Expectation, Vec<Message>, Option<String>)> = None;
    let finish = |b: (usize, Expectation, Vec<Message>, Option<String>),
                  out: &mut Vec<CheckResult>| {
        let (line, expect, msgs, decode_err) = b;
        let name = format!("sequence:{line}");
        if let Some(e) = decode_err {
            out.push(CheckResult::fail(name, e));
            return;
        }
        let got = validate_sequence(&msgs);
        let r = match (&expect, got) {
            (Expectation::Valid, Ok(())) => Ok("valid".to_string()),
            (Expectation::Valid, Err(v)) => Err(format!("expected valid, got {v}")),
            (Expectation::Violation { rule, index }, Err(v)) => {
                if v.rule.code() == rule && v.index == *index {
                    Ok(format!("{rule} at {index}"))
                } else {
                    Err(format!(
                        "expected {rule} at {index}, got {} at {}",
                        v.rule, v.index
                    ))
                }
            }
            (Expectation::Violation { rule, index }, Ok(())) => {
                Err(format!("expected {rule} at {index}, sequence was accepted"))
            }
        };
        out.push(CheckResult::from_result(&name, r));
    };
    for (i, line) in text.lines().enumerate() {
        if let Some(expect) = parse_expectation(line) {
            if let Some(b) = block.take() {
                finish(b, &mut out);
            }
            block = Some((i + 1, expect, Vec::new(), None));
        } else if line.trim().is_empty() || line.starts_with('#') {
            continue;
        } else if let Some((_, _, msgs, err)) = block.as_mut() {
            match decode_message(line) {
                Ok(m) => msgs.push(m),
                Err(e) => {
                    err.get_or_insert(format!("line {}: {e}", i + 1));
                }
            }
        }
    }
    if let Some(b) = block.take() {
        finish(b, &mut out);
    }
    out
}

/// All three bundled corpora.
pub fn check_bundled_corpus() -> Vec<CheckResult> {
    let mut out = check_valid_corpus(VALID_CORPUS);
    out.extend(check_invalid_corpus(INVALID_CORPUS));
    out.extend(check_sequence_corpus(SEQUENCE_CORPUS));
    out
}

/// A started worker. The child, when present, is killed if a scenario times
/// out so the blocked reader returns.
pub struct WorkerHandle {
    pub link: WorkerLink,
    pub child: Option<Child>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    /// Per-scenario wall-clock limit.
    pub timeout: StdDuration,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            timeout: StdDuration::from_secs(30),
        }
    }
}

type Scenario = fn(WorkerLink) -> Result<String, String>;

fn run_scenario<F>(
    name: &str,
    factory: &mut F,
    config: &SuiteConfig,
    scenario: Scenario,
) -> CheckResult
where
    F: FnMut() -> Result<WorkerHandle, FactoryError>,
{
    let WorkerHandle { link, mut child } = match factory() {
        Ok(h) => h,
        Err(e) => return CheckResult::fail(name, format!("could not start worker: {e}")),
    };
    let (tx, rx) = mpsc::channel();
    let handle = thread::spawn(move || {
        let _ = tx.send(scenario(link));
    });
    let (result, finished) = match rx.recv_timeout(config.timeout) {
        Ok(r) => (r, true),
        Err(_) => (Err(format!("no result within {:?}", config.timeout)), false),
    };
    if let Some(c) = child.as_mut() {
        reap(c, result.is_err());
    }
    if finished {
        let _ = handle.join();
    }
    CheckResult::from_result(name, result)
}

/// Gives a worker that received `shutdown` a moment to exit, then kills it.
fn reap(child: &mut Child, kill_now: bool) {
    if !kill_now {
        for _ in 0..100 {
            if matches!(child.try_wait(), Ok(Some(_))) {
                return;
            }
            thread::sleep(StdDuration::from_millis(20));
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

fn tiny_profile() -> ModelProfile {
    ModelProfile::new("conformance-tiny", 8, 1, 1, 8, 2, 2, 7.0).expect("valid profile")
}

fn ts(s: f64) -> Timestamp {
    Timestamp::from_secs_f64(s).expect("valid time")
}

fn scenario_plan(frames: u64, fps: f64, launches: &[f64]) -> SessionPlan {
    let stream = StreamPlan::synthetic(SyntheticStream {
        frame_count: frames,
        fps,
        seed: 0,
    })
    .expect("valid stream");
    let queries = launches
        .iter()
        .enumerate()
        .map(|(i, &t0)| QuerySpec {
            query_id: format!("q{}", i + 1),
            t0: ts(t0),
            text: "Which option is correct?".into(),
            options: vec![
                AnswerOption {
                    label: "A".into(),
                    text: "first".into(),
                },
                AnswerOption {
                    label: "B".into(),
                    text: "second".into(),
                },
            ],
            gold: "A".into(),
            task: String::new(),
            cluster: String::new(),
        })
        .collect();
    SessionPlan::new(stream, queries)
}

fn summarize(out: &SessionOutcome, frames: usize, queries: usize) -> Result<String, String> {
    validate_sequence(&out.transcript).map_err(|v| format!("transcript invalid: {v}"))?;
    let encoded = out
        .log
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::FrameEncoded { .. }))
        .count();
    let answered = out
        .log
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::AnswerDone { .. }))
        .count();
    if encoded != frames {
        return Err(format!("{encoded} of {frames} frames encoded"));
    }
    if answered != queries {
        return Err(format!("{answered} of {queries} queries answered"));
    }
    Ok(format!("{encoded} frames encoded, {answered} answered"))
}

fn session_scenario(
    link: WorkerLink,
    config: SessionConfig,
    plan: SessionPlan,
) -> Result<String, String> {
    let frames = plan.stream.len();
    let queries = plan.queries.len();
    let out = run_session(&config, &plan, link).map_err(|e| e.to_string())?;
    summarize(&out, frames, queries)
}

fn handshake(mut link: WorkerLink) -> Result<String, String> {
    let hello = Message::Hello(Hello {
        protocol: PROTOCOL_VERSION,
        session_id: "conformance-handshake".into(),
        mode: Mode::Native,
        profile: None,
        capacity_tokens: None,
        config: [("clock".to_string(), "wall".to_string())].into(),
    });
    link.send(&hello).map_err(|e| e.to_string())?;
    // Error reports about earlier input may precede the ack.
    let ack = loop {
        match link.recv().map_err(|e| e.to_string())? {
            Message::HelloAck(a) => break a,
            Message::WorkerError(_) => continue,
            other => return Err(format!("expected hello_ack, got `{}`", other.tag())),
        }
    };
    link.send(&Message::Shutdown).map_err(|e| e.to_string())?;
    if ack.worker_name.is_empty() {
        return Err("hello_ack has an empty worker_name".into());
    }
    Ok(format!(
        "{} [{}]",
        ack.worker_name,
        ack.capabilities.join(", ")
    ))
}

fn wall_native(link: WorkerLink) -> Result<String, String> {
    let config = SessionConfig::new("conformance-wall-native", Mode::Native, ClockKind::Wall);
    session_scenario(link, config, scenario_plan(3, 10.0, &[0.15]))
}

fn wall_adapter(link: WorkerLink) -> Result<String, String> {
    let budget = ByteBudget::from_bytes(1 << 20).expect("valid budget");
    let config = SessionConfig::new("conformance-wall-adapter", Mode::Adapter, ClockKind::Wall)
        .with_budget(tiny_profile(), budget);
    session_scenario(link, config, scenario_plan(3, 10.0, &[0.25]))
}

fn dialogue(link: WorkerLink) -> Result<String, String> {
    let mut config = SessionConfig::new("conformance-dialogue", Mode::Native, ClockKind::Wall);
    config.dialogue_context = true;
    session_scenario(link, config, scenario_plan(3, 10.0, &[0.1, 0.2]))
}

fn garbage_tolerance(mut link: WorkerLink) -> Result<String, String> {
    link.send_line("this is not json")
        .map_err(|e| e.to_string())?;
    handshake(link)
}

fn virtual_native(link: WorkerLink) -> Result<String, String> {
    let config = SessionConfig::new("conformance-virtual", Mode::Native, ClockKind::Virtual);
    session_scenario(link, config, scenario_plan(5, 2.0, &[1.2, 1.3]))
}

/// Runs every scenario against fresh workers. The virtual-clock scenario runs
/// only when the handshake advertises the capability.
pub fn run_worker_suite<F>(mut factory: F, config: &SuiteConfig) -> Vec<CheckResult>
where
    F: FnMut() -> Result<WorkerHandle, FactoryError>,
{
    let mut out = vec![run_scenario(
        "worker:handshake",
        &mut factory,
        config,
        handshake,
    )];
    let virtual_clock = out[0].passed
        && out[0]
            .detail
            .split(['[', ']', ','])
            .any(|c| c.trim() == VIRTUAL_CLOCK_CAPABILITY);
    let scenarios: [(&str, Scenario); 4] = [
        ("worker:wall-native", wall_native),
        ("worker:wall-adapter", wall_adapter),
        ("worker:dialogue-context", dialogue),
        ("worker:malformed-input", garbage_tolerance),
    ];
    for (name, s) in scenarios {
        out.push(run_scenario(name, &mut factory, config, s));
    }
    if virtual_clock {
        out.push(run_scenario(
            "worker:virtual-native",
            &mut factory,
            config,
            virtual_native,
        ));
    } else {
        out.push(CheckResult::pass(
            "worker:virtual-native",
            "skipped: virtual-clock not advertised",
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{MockConfig, MockWorker};

    #[test]
    fn bundled_corpus_passes() {
        let results = check_bundled_corpus();
        for r in results.iter().filter(|r| !r.passed) {
            eprintln!("{r}");
        }
        assert!(all_passed(&results));
        assert!(results.len() > 60);
    }

    #[test]
    fn corpus_checks_detect_mismatches() {
        let r = check_invalid_corpus("missing-field: type\t{\"type\":\"frame\"}\n");
        assert!(!r[0].passed);
        let r = check_sequence_corpus("# expect duplicate-hello at 1\n{\"type\":\"shutdown\"}\n");
        assert!(!r[0].passed);
        assert!(r[0].detail.contains("expected-hello at 0"));
    }

    #[test]
    fn mock_worker_passes_suite() {
        let factory = || -> Result<WorkerHandle, FactoryError> {
            let w = MockWorker::new(MockConfig {
                encode_cost_s: 0.02,
                first_token_delay_s: 0.02,
                ..Default::default()
            })?;
            let (harness, worker) = crate::protocol::duplex();
            thread::spawn(move || w.serve(worker));
            Ok(WorkerHandle {
                link: harness,
                child: None,
            })
        };
        let results = run_worker_suite(factory, &SuiteConfig::default());
        for r in &results {
            eprintln!("{r}");
        }
        assert!(all_passed(&results));
        assert!(results
            .iter()
            .any(|r| r.name == "worker:virtual-native" && r.detail.contains("answered")));
    }
}
