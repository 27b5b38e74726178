//! Fixtures shared by the harness benchmarks.

use streameval::budget::ModelProfile;
use streameval::mock::{MockConfig, MockWorker};
use streameval::protocol::{AnswerOption, Frame, FrameEncoded, Message, Query, Token, WorkerLink};
use streameval::session::{QuerySpec, SessionPlan, StreamPlan, SyntheticStream};
use streameval::time::Timestamp;

pub fn example_profile() -> ModelProfile {
    ModelProfile::new("example-7b", 3584, 28, 4, 128, 2, 2, 7.0).expect("valid profile")
}

/// A synthetic stream with one query every `query_every_s` seconds.
pub fn synthetic_plan(frames: u64, fps: f64, query_every_s: f64) -> SessionPlan {
    let stream = StreamPlan::synthetic(SyntheticStream {
        frame_count: frames,
        fps,
        seed: 7,
    })
    .expect("valid stream");
    let duration = frames as f64 / fps;
    let queries = (1..)
        .map(|i| i as f64 * query_every_s)
        .take_while(|t| *t < duration)
        .enumerate()
        .map(|(i, t0)| QuerySpec {
            query_id: format!("q{i}"),
            t0: Timestamp::from_secs_f64(t0).expect("valid time"),
            text: "Which option?".into(),
            options: ["A", "B", "C", "D"]
                .iter()
                .map(|l| AnswerOption {
                    label: l.to_string(),
                    text: format!("option {l}"),
                })
                .collect(),
            gold: "A".into(),
            task: "bench".into(),
            cluster: "realtime".into(),
        })
        .collect();
    SessionPlan::new(stream, queries)
}

pub fn mock_link(encode_cost_s: f64, tokens_per_frame: u64) -> WorkerLink {
    MockWorker::new(MockConfig {
        encode_cost_s,
        tokens_per_frame,
        query_encode_cost_s: 0.05,
        first_token_delay_s: 0.1,
        inter_token_s: 0.02,
        answer_len_tokens: 8,
        ..Default::default()
    })
    .expect("valid mock")
    .into_link()
}

/// One message of each common kind, as a mode-agnostic mix.
pub fn message_mix() -> Vec<Message> {
    vec![
        Message::Frame(Frame {
            frame_id: 1234,
            t_emit: 154.25,
            payload_ref: "frames/001234.jpg".into(),
        }),
        Message::FrameEncoded(FrameEncoded {
            frame_id: 1234,
            t_done: 154.375,
            token_count: Some(196),
            handle: Some("kv://1234".into()),
        }),
        Message::Query(Query {
            query_id: "q17".into(),
            t0: 160.0,
            text: "What is the person holding?".into(),
            options: vec![
                AnswerOption {
                    label: "A".into(),
                    text: "a cup".into(),
                },
                AnswerOption {
                    label: "B".into(),
                    text: "a phone".into(),
                },
            ],
            snapshot_frame_ids: Some((1200..1234).collect()),
            transcript: None,
        }),
        Message::Token(Token {
            query_id: "q17".into(),
            t: 160.5,
            text_piece: "B".into(),
        }),
    ]
}
