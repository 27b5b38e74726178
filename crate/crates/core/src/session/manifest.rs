//! Stream and query manifests (JSON Lines).
//!
//! Stream manifest: a header line, then one record per frame.
//!
//! ```text
//! {"fps":1.0,"duration_s":3.0}
//! {"frame_id":0,"payload_ref":"frames/000000.jpg"}
//! ...
//! ```
//!
//! or a single synthetic header that generates its own payload references:
//!
//! ```text
//! {"synthetic":{"frame_count":120,"fps":2.0,"seed":7}}
//! ```
//!
//! Query manifest: one query per line.
//!
//! ```text
//! {"query_id":"q1","t0":2.5,"text":"...","options":[{"label":"A","text":"..."}],"gold":"A","task":"EPM","cluster":"backward"}
//! ```
//!
//! Blank lines and lines starting with `#` are skipped in both files.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::AnswerOption;
use crate::time::{build_schedule, FrameSchedule, TimeError, Timestamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("{source_name}:{line}: {message}")]
    Line {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}: {message}")]
    File {
        source_name: String,
        message: String,
    },
}

fn line_err(source_name: &str, line: usize, message: impl Into<String>) -> ManifestError {
    ManifestError::Line {
        source_name: source_name.to_string(),
        line,
        message: message.into(),
    }
}

fn file_err(source_name: &str, message: impl Into<String>) -> ManifestError {
    ManifestError::File {
        source_name: source_name.to_string(),
        message: message.into(),
    }
}

/// One benchmark question with its launch time and scoring metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub query_id: String,
    pub t0: Timestamp,
    pub text: String,
    #[serde(default)]
    pub options: Vec<AnswerOption>,
    pub gold: String,
    #[serde(default)]
    pub task: String,
    #[serde(default)]
    pub cluster: String,
}

impl QuerySpec {
    pub fn option_labels(&self) -> Vec<String> {
        self.options.iter().map(|o| o.label.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticStream {
    pub frame_count: u64,
    pub fps: f64,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamHeader {
    fps: Option<f64>,
    duration_s: Option<f64>,
    synthetic: Option<SyntheticStream>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame_id: u64,
    payload_ref: String,
}

/// Frames to emit: the schedule plus one payload reference per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPlan {
    pub schedule: FrameSchedule,
    pub payloads: Vec<String>,
}

impl StreamPlan {
    /// `frame_count` frames at `fps` with generated payload references.
    pub fn synthetic(spec: SyntheticStream) -> Result<Self, TimeError> {
        let payloads = synthetic_payloads(&spec);
        Self::resample(spec.fps, spec.frame_count as f64 / spec.fps, payloads, None)
    }

    /// Schedules `payloads` (recorded at `source_fps`) at `fps`, or at the
    /// source rate when `fps` is `None`. Frame i shows the source frame
    /// current at its emission time.
    fn resample(
        source_fps: f64,
        duration_s: f64,
        payloads: Vec<String>,
        fps: Option<f64>,
    ) -> Result<Self, TimeError> {
        let rate = fps.unwrap_or(source_fps);
        let mut schedule = build_schedule(rate, duration_s)?;
        if fps.is_none() {
            schedule.truncate(payloads.len());
            return Ok(StreamPlan { schedule, payloads });
        }
        let picked = schedule
            .emit_times()
            .iter()
            .map(|t| {
                // Nudge so exact multiples survive float error.
                let idx = (t.as_secs_f64() * source_fps + 1e-9).floor() as usize;
                payloads[idx.min(payloads.len() - 1)].clone()
            })
            .collect();
        Ok(StreamPlan {
            schedule,
            payloads: picked,
        })
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }
}

fn synthetic_payloads(spec: &SyntheticStream) -> Vec<String> {
    (0..spec.frame_count)
        .map(|i| format!("synthetic://seed/{}/frame/{i}", spec.seed))
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses a stream manifest. `fps` overrides the manifest rate.
pub fn parse_stream_manifest(
    text: &str,
    source_name: &str,
    fps: Option<f64>,
) -> Result<StreamPlan, ManifestError> {
    let mut lines = content_lines(text);
    let (hline, htext) = lines
        .next()
        .ok_or_else(|| file_err(source_name, "empty stream manifest"))?;
    let header: StreamHeader = serde_json::from_str(htext)
        .map_err(|e| line_err(source_name, hline, format!("bad header: {e}")))?;
    let time_err = |e: TimeError| line_err(source_name, hline, e.to_string());

    if let Some(syn) = header.synthetic {
        if header.fps.is_some() || header.duration_s.is_some() {
            return Err(line_err(
                source_name,
                hline,
                "synthetic header cannot also set fps or duration_s",
            ));
        }
        if syn.frame_count == 0 {
            return Err(line_err(source_name, hline, "frame_count must be >= 1"));
        }
        if let Some((l, _)) = lines.next() {
            return Err(line_err(
                source_name,
                l,
                "synthetic manifest takes no frame records",
            ));
        }
        if !(syn.fps.is_finite() && syn.fps > 0.0) {
            return Err(time_err(TimeError::InvalidFps(syn.fps)));
        }
        let payloads = synthetic_payloads(&syn);
        return StreamPlan::resample(syn.fps, syn.frame_count as f64 / syn.fps, payloads, fps)
            .map_err(time_err);
    }

    let source_fps = header
        .fps
        .ok_or_else(|| line_err(source_name, hline, "header needs `fps` or `synthetic`"))?;
    if !(source_fps.is_finite() && source_fps > 0.0) {
        return Err(time_err(TimeError::InvalidFps(source_fps)));
    }
    let mut payloads = Vec::new();
    for (l, t) in lines {
        let rec: FrameRecord = serde_json::from_str(t)
            .map_err(|e| line_err(source_name, l, format!("bad frame record: {e}")))?;
        if rec.frame_id != payloads.len() as u64 {
            return Err(line_err(
                source_name,
                l,
                format!("expected frame_id {}, got {}", payloads.len(), rec.frame_id),
            ));
        }
        payloads.push(rec.payload_ref);
    }
    if payloads.is_empty() {
        return Err(file_err(source_name, "stream manifest lists no frames"));
    }
    let listed_span = payloads.len() as f64 / source_fps;
    let duration = header.duration_s.unwrap_or(listed_span);
    if duration > listed_span + 1e-9 {
        return Err(line_err(
            source_name,
            hline,
            format!(
                "duration_s {duration} needs {} frames at {source_fps} fps, only {} listed",
                (duration * source_fps).ceil(),
                payloads.len()
            ),
        ));
    }
    StreamPlan::resample(source_fps, duration, payloads, fps).map_err(time_err)
}

/// Parses a query manifest and returns the queries sorted by launch time
/// (manifest order breaks ties).
pub fn parse_query_manifest(
    text: &str,
    source_name: &str,
) -> Result<Vec<QuerySpec>, ManifestError> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (l, t) in content_lines(text) {
        let q: QuerySpec =
            serde_json::from_str(t).map_err(|e| line_err(source_name, l, e.to_string()))?;
        if q.query_id.is_empty() {
            return Err(line_err(source_name, l, "query_id must not be empty"));
        }
        if !seen.insert(q.query_id.clone()) {
            return Err(line_err(
                source_name,
                l,
                format!("duplicate query_id `{}`", q.query_id),
            ));
        }
        let mut labels = HashSet::new();
        for o in &q.options {
            if !labels.insert(o.label.as_str()) {
                return Err(line_err(
                    source_name,
                    l,
                    format!("query `{}` repeats option label `{}`", q.query_id, o.label),
                ));
            }
        }
        if !q.options.is_empty() && !labels.contains(q.gold.as_str()) {
            return Err(line_err(
                source_name,
                l,
                format!(
                    "query `{}` gold `{}` is not an option label",
                    q.query_id, q.gold
                ),
            ));
        }
        queries.push(q);
    }
    queries.sort_by_key(|q| q.t0);
    Ok(queries)
}

fn read(path: &Path) -> Result<String, ManifestError> {
    std::fs::read_to_string(path).map_err(|e| file_err(&path.display().to_string(), e.to_string()))
}

pub fn load_stream_manifest(path: &Path, fps: Option<f64>) -> Result<StreamPlan, ManifestError> {
    parse_stream_manifest(&read(path)?, &path.display().to_string(), fps)
}

pub fn load_query_manifest(path: &Path) -> Result<Vec<QuerySpec>, ManifestError> {
    parse_query_manifest(&read(path)?, &path.display().to_string())
}

/// Everything a session needs besides its configuration and worker.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionPlan {
    pub stream: StreamPlan,
    pub queries: Vec<QuerySpec>,
}

impl SessionPlan {
    pub fn new(stream: StreamPlan, mut queries: Vec<QuerySpec>) -> Self {
        queries.sort_by_key(|q| q.t0);
        for q in &queries {
            if q.t0.as_secs_f64() >= stream.schedule.duration_s() {
                log::warn!(
                    "query `{}` launches at {} after the stream ends at {}s",
                    q.query_id,
                    q.t0,
                    stream.schedule.duration_s()
                );
            }
        }
        SessionPlan { stream, queries }
    }
}

/// Loads both manifests into a plan.
pub fn ingest_manifests(
    stream_path: &Path,
    query_path: Option<&Path>,
    fps: Option<f64>,
) -> Result<SessionPlan, ManifestError> {
    let stream = load_stream_manifest(stream_path, fps)?;
    let queries = match query_path {
        Some(p) => load_query_manifest(p)?,
        None => Vec::new(),
    };
    Ok(SessionPlan::new(stream, queries))
}
