use std::collections::BTreeMap;

use serde_json::{Map, Value};
use thiserror::Error;

use super::*;

/// Why a line failed to decode. The `Display` form is the stable error code
/// plus the offending field or tag; the raw line is kept alongside.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed-line")]
    Malformed { line: String, reason: String },
    #[error("unknown-type: {tag}")]
    UnknownType { line: String, tag: String },
    #[error("missing-field: {field}")]
    MissingField { line: String, field: String },
    #[error("wrong-type: {field} (expected {expected})")]
    WrongType {
        line: String,
        field: String,
        expected: &'static str,
    },
}

impl DecodeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::Malformed { .. } => "malformed-line",
            DecodeError::UnknownType { .. } => "unknown-type",
            DecodeError::MissingField { .. } => "missing-field",
            DecodeError::WrongType { .. } => "wrong-type",
        }
    }

    pub fn line(&self) -> &str {
        match self {
            DecodeError::Malformed { line, .. }
            | DecodeError::UnknownType { line, .. }
            | DecodeError::MissingField { line, .. }
            | DecodeError::WrongType { line, .. } => line,
        }
    }
}

/// Serializes `msg` as one `\n`-terminated line.
pub fn encode_message(msg: &Message) -> String {
    let mut obj = Map::new();
    obj.insert("type".into(), msg.tag().into());
    match msg {
        Message::Hello(h) => {
            obj.insert("protocol".into(), h.protocol.into());
            obj.insert("session_id".into(), h.session_id.clone().into());
            obj.insert("mode".into(), h.mode.as_str().into());
            if let Some(p) = &h.profile {
                obj.insert(
                    "profile".into(),
                    serde_json::to_value(p).expect("profile serializes"),
                );
            }
            if let Some(c) = h.capacity_tokens {
                obj.insert("capacity_tokens".into(), c.into());
            }
            let config: Map<String, Value> = h
                .config
                .iter()
                .map(|(k, v)| (k.clone(), Value::from(v.clone())))
                .collect();
            obj.insert("config".into(), Value::Object(config));
        }
        Message::Frame(f) => {
            obj.insert("frame_id".into(), f.frame_id.into());
            obj.insert("t_emit".into(), f.t_emit.into());
            obj.insert("payload_ref".into(), f.payload_ref.clone().into());
        }
        Message::QueryLaunch(q) => {
            obj.insert("query_id".into(), q.query_id.clone().into());
            obj.insert("t0".into(), q.t0.into());
            obj.insert("text".into(), q.text.clone().into());
        }
        Message::Query(q) => {
            obj.insert("query_id".into(), q.query_id.clone().into());
            obj.insert("t0".into(), q.t0.into());
            obj.insert("text".into(), q.text.clone().into());
            obj.insert(
                "options".into(),
                serde_json::to_value(&q.options).expect("options serialize"),
            );
            if let Some(ids) = &q.snapshot_frame_ids {
                obj.insert("snapshot_frame_ids".into(), ids.clone().into());
            }
            if let Some(turns) = &q.transcript {
                obj.insert(
                    "transcript".into(),
                    serde_json::to_value(turns).expect("transcript serializes"),
                );
            }
        }
        Message::Shutdown => {}
        Message::HelloAck(a) => {
            obj.insert("worker_name".into(), a.worker_name.clone().into());
            obj.insert("capabilities".into(), a.capabilities.clone().into());
        }
        Message::FrameEncoded(f) => {
            obj.insert("frame_id".into(), f.frame_id.into());
            obj.insert("t_done".into(), f.t_done.into());
            if let Some(n) = f.token_count {
                obj.insert("token_count".into(), n.into());
            }
            if let Some(h) = &f.handle {
                obj.insert("handle".into(), h.clone().into());
            }
        }
        Message::QueryEncoded(q) => {
            obj.insert("query_id".into(), q.query_id.clone().into());
            obj.insert("t1".into(), q.t1.into());
        }
        Message::Token(t) => {
            obj.insert("query_id".into(), t.query_id.clone().into());
            obj.insert("t".into(), t.t.into());
            obj.insert("text_piece".into(), t.text_piece.clone().into());
        }
        Message::AnswerDone(a) => {
            obj.insert("query_id".into(), a.query_id.clone().into());
            obj.insert("t_last".into(), a.t_last.into());
            obj.insert("final_text".into(), a.final_text.clone().into());
        }
        Message::WorkerError(e) => {
            obj.insert("code".into(), e.code.clone().into());
            obj.insert("detail".into(), e.detail.clone().into());
            if let Some(id) = e.frame_id {
                obj.insert("frame_id".into(), id.into());
            }
            if let Some(id) = &e.query_id {
                obj.insert("query_id".into(), id.clone().into());
            }
        }
    }
    let mut line = Value::Object(obj).to_string();
    line.push('\n');
    line
}

struct Fields<'a> {
    line: &'a str,
    obj: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn missing(&self, field: &str) -> DecodeError {
        DecodeError::MissingField {
            line: self.line.to_string(),
            field: field.to_string(),
        }
    }

    fn wrong(&self, field: &str, expected: &'static str) -> DecodeError {
        DecodeError::WrongType {
            line: self.line.to_string(),
            field: field.to_string(),
            expected,
        }
    }

    fn get(&self, field: &str) -> Option<&'a Value> {
        self.obj.get(field).filter(|v| !v.is_null())
    }

    fn req(&self, field: &str) -> Result<&'a Value, DecodeError> {
        self.get(field).ok_or_else(|| self.missing(field))
    }

    fn string(&self, field: &str) -> Result<String, DecodeError> {
        self.req(field)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.wrong(field, "string"))
    }

    fn opt_string(&self, field: &str) -> Result<Option<String>, DecodeError> {
        self.get(field)
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| self.wrong(field, "string"))
            })
            .transpose()
    }

    fn uint(&self, field: &str) -> Result<u64, DecodeError> {
        self.req(field)?
            .as_u64()
            .ok_or_else(|| self.wrong(field, "unsigned integer"))
    }

    fn opt_uint(&self, field: &str) -> Result<Option<u64>, DecodeError> {
        self.get(field)
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| self.wrong(field, "unsigned integer"))
            })
            .transpose()
    }

    fn seconds(&self, field: &str) -> Result<f64, DecodeError> {
        self.req(field)?
            .as_f64()
            .filter(|s| s.is_finite() && *s >= 0.0)
            .ok_or_else(|| self.wrong(field, "non-negative number"))
    }

    fn strings(&self, field: &str) -> Result<Vec<String>, DecodeError> {
        let arr = self
            .req(field)?
            .as_array()
            .ok_or_else(|| self.wrong(field, "array of strings"))?;
        arr.iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| self.wrong(field, "array of strings"))
    }

    fn opt_uints(&self, field: &str) -> Result<Option<Vec<u64>>, DecodeError> {
        let Some(v) = self.get(field) else {
            return Ok(None);
        };
        let arr = v
            .as_array()
            .ok_or_else(|| self.wrong(field, "array of unsigned integers"))?;
        arr.iter()
            .map(Value::as_u64)
            .collect::<Option<Vec<_>>>()
            .map(Some)
            .ok_or_else(|| self.wrong(field, "array of unsigned integers"))
    }

    fn typed<T: serde::de::DeserializeOwned>(
        &self,
        v: &Value,
        field: &str,
        expected: &'static str,
    ) -> Result<T, DecodeError> {
        serde_json::from_value(v.clone()).map_err(|_| self.wrong(field, expected))
    }

    fn options(&self, field: &str) -> Result<Vec<AnswerOption>, DecodeError> {
        let v = self.req(field)?;
        self.typed(v, field, "array of {label, text}")
    }

    fn opt_transcript(&self, field: &str) -> Result<Option<Vec<Turn>>, DecodeError> {
        self.get(field)
            .map(|v| self.typed(v, field, "array of {question, answer}"))
            .transpose()
    }

    fn config(&self, field: &str) -> Result<BTreeMap<String, String>, DecodeError> {
        let obj = self
            .req(field)?
            .as_object()
            .ok_or_else(|| self.wrong(field, "object of strings"))?;
        obj.iter()
            .map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
            .collect::<Option<_>>()
            .ok_or_else(|| self.wrong(field, "object of strings"))
    }
}

/// Parses one line (a trailing `\n` or `\r\n` is ignored).
pub fn decode_message(line: &str) -> Result<Message, DecodeError> {
    let trimmed = line.trim_end_matches(['\n', '\r']);
    let malformed = |reason: &str| DecodeError::Malformed {
        line: trimmed.to_string(),
        reason: reason.to_string(),
    };
    if trimmed.trim().is_empty() {
        return Err(malformed("empty line"));
    }
    let value: Value = serde_json::from_str(trimmed).map_err(|e| malformed(&e.to_string()))?;
    let Value::Object(obj) = &value else {
        return Err(malformed("not a JSON object"));
    };
    let f = Fields { line: trimmed, obj };
    let tag = f.string("type")?;

    let msg = match tag.as_str() {
        "hello" => {
            let mode = match f.string("mode")?.as_str() {
                "native" => Mode::Native,
                "adapter" => Mode::Adapter,
                _ => return Err(f.wrong("mode", "\"native\" or \"adapter\"")),
            };
            let profile = f
                .get("profile")
                .map(|v| f.typed(v, "profile", "model profile object"))
                .transpose()?;
            Message::Hello(Hello {
                protocol: f.uint("protocol")?,
                session_id: f.string("session_id")?,
                mode,
                profile,
                capacity_tokens: f.opt_uint("capacity_tokens")?,
                config: f.config("config")?,
            })
        }
        "frame" => Message::Frame(Frame {
            frame_id: f.uint("frame_id")?,
            t_emit: f.seconds("t_emit")?,
            payload_ref: f.string("payload_ref")?,
        }),
        "query_launch" => Message::QueryLaunch(QueryLaunch {
            query_id: f.string("query_id")?,
            t0: f.seconds("t0")?,
            text: f.string("text")?,
        }),
        "query" => Message::Query(Query {
            query_id: f.string("query_id")?,
            t0: f.seconds("t0")?,
            text: f.string("text")?,
            options: f.options("options")?,
            snapshot_frame_ids: f.opt_uints("snapshot_frame_ids")?,
            transcript: f.opt_transcript("transcript")?,
        }),
        "shutdown" => Message::Shutdown,
        "hello_ack" => Message::HelloAck(HelloAck {
            worker_name: f.string("worker_name")?,
            capabilities: f.strings("capabilities")?,
        }),
        "frame_encoded" => Message::FrameEncoded(FrameEncoded {
            frame_id: f.uint("frame_id")?,
            t_done: f.seconds("t_done")?,
            token_count: f.opt_uint("token_count")?,
            handle: f.opt_string("handle")?,
        }),
        "query_encoded" => Message::QueryEncoded(QueryEncoded {
            query_id: f.string("query_id")?,
            t1: f.seconds("t1")?,
        }),
        "token" => Message::Token(Token {
            query_id: f.string("query_id")?,
            t: f.seconds("t")?,
            text_piece: f.string("text_piece")?,
        }),
        "answer_done" => Message::AnswerDone(AnswerDone {
            query_id: f.string("query_id")?,
            t_last: f.seconds("t_last")?,
            final_text: f.string("final_text")?,
        }),
        "worker_error" => Message::WorkerError(WorkerError {
            code: f.string("code")?,
            detail: f.string("detail")?,
            frame_id: f.opt_uint("frame_id")?,
            query_id: f.opt_string("query_id")?,
        }),
        _ => {
            return Err(DecodeError::UnknownType {
                line: trimmed.to_string(),
                tag,
            })
        }
    };
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shutdown_is_canonical() {
        assert_eq!(
            encode_message(&Message::Shutdown),
            "{\"type\":\"shutdown\"}\n"
        );
    }

    #[test]
    fn frame_fields_pass_through() {
        let line = encode_message(&Message::Frame(Frame {
            frame_id: 3,
            t_emit: 3.0,
            payload_ref: "frames/000003.jpg".into(),
        }));
        assert_eq!(
            line,
            "{\"type\":\"frame\",\"frame_id\":3,\"t_emit\":3.0,\"payload_ref\":\"frames/000003.jpg\"}\n"
        );
    }

    #[test]
    fn empty_line_is_malformed() {
        assert_eq!(decode_message("").unwrap_err().code(), "malformed-line");
        assert_eq!(decode_message("\n").unwrap_err().code(), "malformed-line");
        assert_eq!(
            decode_message("[1,2]").unwrap_err().code(),
            "malformed-line"
        );
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let m = decode_message(r#"{"type":"query_encoded","query_id":"q","t1":1.5,"gpu":"x"}"#)
            .unwrap();
        assert_eq!(
            m,
            Message::QueryEncoded(QueryEncoded {
                query_id: "q".into(),
                t1: 1.5
            })
        );
    }

    #[test]
    fn integer_timestamps_accepted() {
        let m = decode_message(r#"{"type":"frame_encoded","frame_id":0,"t_done":2}"#).unwrap();
        assert!(matches!(m, Message::FrameEncoded(FrameEncoded { t_done, .. }) if t_done == 2.0));
    }

    #[test]
    fn error_kinds_are_distinct() {
        let e = decode_message(r#"{"type":"teleport"}"#).unwrap_err();
        assert_eq!(e.to_string(), "unknown-type: teleport");
        assert_eq!(e.line(), r#"{"type":"teleport"}"#);
        let e = decode_message(r#"{"type":"frame","frame_id":1,"payload_ref":"x"}"#).unwrap_err();
        assert_eq!(e.to_string(), "missing-field: t_emit");
        let e = decode_message(r#"{"type":"frame","frame_id":"1","t_emit":0,"payload_ref":"x"}"#)
            .unwrap_err();
        assert_eq!(e.code(), "wrong-type");
        let e = decode_message(r#"{"frame_id":1}"#).unwrap_err();
        assert_eq!(e.to_string(), "missing-field: type");
    }

    fn arb_time() -> impl Strategy<Value = f64> {
        prop_oneof![
            (0u64..10_000_000_000_000).prop_map(|ns| ns as f64 / 1e9),
            0.0f64..1e6,
        ]
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[ -~éü\u{4e2d}\"\\\\\n\t]{0,12}"
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let opts = prop::collection::vec((arb_text(), arb_text()), 0..4).prop_map(|v| {
            v.into_iter()
                .map(|(label, text)| AnswerOption { label, text })
                .collect::<Vec<_>>()
        });
        prop_oneof![
            Just(Message::Shutdown),
            (any::<u64>(), arb_time(), arb_text()).prop_map(|(frame_id, t_emit, payload_ref)| {
                Message::Frame(Frame {
                    frame_id,
                    t_emit,
                    payload_ref,
                })
            }),
            (
                arb_text(),
                arb_time(),
                arb_text(),
                opts,
                prop::option::of(prop::collection::vec(any::<u64>(), 0..5))
            )
                .prop_map(|(query_id, t0, text, options, snapshot_frame_ids)| {
                    Message::Query(Query {
                        query_id,
                        t0,
                        text,
                        options,
                        snapshot_frame_ids,
                        transcript: None,
                    })
                }),
            (
                any::<u64>(),
                arb_time(),
                prop::option::of(any::<u64>()),
                prop::option::of(arb_text())
            )
                .prop_map(|(frame_id, t_done, token_count, handle)| {
                    Message::FrameEncoded(FrameEncoded {
                        frame_id,
                        t_done,
                        token_count,
                        handle,
                    })
                }),
            (arb_text(), arb_time(), arb_text()).prop_map(|(query_id, t, text_piece)| {
                Message::Token(Token {
                    query_id,
                    t,
                    text_piece,
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(m in arb_message()) {
            let line = encode_message(&m);
            prop_assert!(line.ends_with('\n'));
            prop_assert_eq!(line.matches('\n').count(), 1);
            prop_assert_eq!(decode_message(&line).unwrap(), m);
        }
    }
}
