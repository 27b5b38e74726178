//! Metrics computed from finished session logs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::EventLog;

mod accuracy;
mod latency;
mod probe;
mod rank;
mod score;

pub use accuracy::{extract_label, score_mcq, ExactMatchScorer, McqScorer, Scorer};
pub use latency::{
    latency_stats, measure_e2e, measure_queries, measure_ttft, percentile, LatencyReport,
    LatencyStats, QueryMeasurement,
};
pub use probe::{
    candidate_grid, probe_max_fps, run_trial, trial_backlog, FactoryError, ProbeConfig, ProbeError,
    ProbeOutcome, ProbeResult, TrialResult, GRID_MAX_FPS, GRID_MIN_FPS,
};
pub use rank::{average_ranks, kendall_tau, rank_descending, spearman_rho, RankError};
pub use score::{
    scenario_weights, streaming_score, Factor, Scenario, ScoreError, ScoreInputs, StreamingScore,
    Weights,
};

/// Cluster or task name used when the manifest left it blank.
pub const UNLABELLED: &str = "unlabelled";

/// How per-question results roll up into a cluster accuracy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-task accuracies in the cluster.
    #[default]
    Subtask,
    /// Fraction of all questions in the cluster answered correctly.
    Question,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subtask" => Ok(Aggregation::Subtask),
            "question" => Ok(Aggregation::Question),
            other => Err(format!(
                "unknown aggregation `{other}` (expected subtask or question)"
            )),
        }
    }
}

/// Measured quantities for one model. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub model_id: String,
    pub max_fps: f64,
    pub ttft_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e2e_s: Option<f64>,
    pub acc: f64,
    pub mem_gb: f64,
    pub params_billions: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tasks: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub clusters: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
}

impl MetricsRecord {
    pub fn score_inputs(&self) -> ScoreInputs {
        ScoreInputs {
            max_fps: self.max_fps,
            acc: self.acc,
            ttft_s: self.ttft_s,
            mem_gb: self.mem_gb,
            params_billions: self.params_billions,
        }
    }

    pub fn streaming_score(&self, w: &Weights) -> Result<StreamingScore, ScoreError> {
        streaming_score(&self.score_inputs(), w)
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no query in the log was answered")]
    NoAnswers,
    #[error("log has no queries")]
    NoQueries,
    #[error("model id unknown: pass one explicitly or log a profile")]
    NoModelId,
    #[error("{path}:{line}: {message}")]
    Records {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Inputs a log does not carry by itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LogScoring {
    pub model_id: Option<String>,
    pub max_fps: f64,
    pub mem_gb: Option<f64>,
    pub params_billions: Option<f64>,
    pub aggregation: Aggregation,
}

fn label(s: &str) -> String {
    if s.is_empty() {
        UNLABELLED.to_string()
    } else {
        s.to_string()
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Folds a log into a record. Unanswered queries count as wrong. The header's
/// budget and profile fill `mem_gb` and `params_billions` when not given.
pub fn record_from_log(
    log: &EventLog,
    scoring: &LogScoring,
    scorer: &dyn Scorer,
) -> Result<MetricsRecord, MetricsError> {
    let queries = measure_queries(log);
    if queries.is_empty() {
        return Err(MetricsError::NoQueries);
    }
    let ttft = measure_ttft(log).stats.ok_or(MetricsError::NoAnswers)?;
    let e2e = measure_e2e(log).stats;

    // (cluster, task) -> (correct, total)
    let mut tally: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();
    for q in &queries {
        let ok = q
            .final_text
            .as_deref()
            .is_some_and(|a| scorer.is_correct(a, &q.options, &q.gold));
        let e = tally
            .entry((label(&q.cluster), label(&q.task)))
            .or_default();
        e.0 += u64::from(ok);
        e.1 += 1;
    }
    let mut tasks_acc: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut clusters_in: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
    for ((cluster, task), (c, n)) in &tally {
        let t = tasks_acc.entry(task.clone()).or_default();
        t.0 += c;
        t.1 += n;
        clusters_in
            .entry(cluster.clone())
            .or_default()
            .push((*c, *n));
    }
    let tasks: BTreeMap<String, f64> = tasks_acc
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect();
    let clusters: BTreeMap<String, f64> = clusters_in
        .into_iter()
        .map(|(k, parts)| {
            let v = match scoring.aggregation {
                Aggregation::Subtask => mean(parts.iter().map(|(c, n)| *c as f64 / *n as f64)),
                Aggregation::Question => {
                    let (c, n) = parts.iter().fold((0, 0), |(a, b), (c, n)| (a + c, b + n));
                    c as f64 / n as f64
                }
            };
            (k, v)
        })
        .collect();
    let acc = mean(clusters.values().copied());

    let model_id = scoring
        .model_id
        .clone()
        .or_else(|| log.header.model_id.clone())
        .ok_or(MetricsError::NoModelId)?;
    Ok(MetricsRecord {
        model_id,
        max_fps: scoring.max_fps,
        ttft_s: ttft.mean,
        e2e_s: e2e.map(|s| s.mean),
        acc,
        mem_gb: scoring
            .mem_gb
            .or_else(|| log.header.budget_bytes.map(|b| b as f64 / 1e9))
            .unwrap_or(f64::NAN),
        params_billions: scoring
            .params_billions
            .or(log.header.params_billions)
            .unwrap_or(f64::NAN),
        tasks,
        clusters,
        aggregation: Some(scoring.aggregation),
    })
}

pub fn parse_records(text: &str, source_name: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::Records {
                path: source_name.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_records(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_records(&text, &path.display().to_string())
}

pub fn records_to_jsonl(records: &[MetricsRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Mode;
    use crate::session::{EventKind, LogHeader, SessionEvent, LOG_SCHEMA};
    use crate::time::{ClockKind, Timestamp};

    fn ts(s: f64) -> Timestamp {
        Timestamp::from_secs_f64(s).unwrap()
    }

    fn log_with(answers: &[(&str, &str, &str, Option<&str>)]) -> EventLog {
        let mut events = Vec::new();
        for (i, (id, cluster, task, answer)) in answers.iter().enumerate() {
            let t0 = i as f64;
            events.push(SessionEvent::new(
                ts(t0),
                EventKind::QueryLaunched {
                    query_id: id.to_string(),
                    task: task.to_string(),
                    cluster: cluster.to_string(),
                    gold: "A".into(),
                    options: vec!["A".into(), "B".into()],
                },
            ));
            if let Some(a) = answer {
                events.push(SessionEvent::new(
                    ts(t0 + 0.2),
                    EventKind::FirstToken {
                        query_id: id.to_string(),
                    },
                ));
                events.push(SessionEvent::new(
                    ts(t0 + 0.5),
                    EventKind::AnswerDone {
                        query_id: id.to_string(),
                        final_text: a.to_string(),
                    },
                ));
            }
        }
        EventLog::new(
            LogHeader {
                schema: LOG_SCHEMA.into(),
                session_id: "s".into(),
                mode: Mode::Native,
                clock: ClockKind::Virtual,
                fps: 1.0,
                frames: 0,
                seed: 0,
                model_id: Some("m".into()),
                params_billions: Some(7.0),
                budget_bytes: Some(500_000_000),
                capacity_tokens: None,
                worker: None,
            },
            events,
        )
    }

    #[test]
    fn record_hierarchy_and_aggregations() {
        // Cluster x: task t1 1/1, task t2 1/3. Cluster y: 0/1.
        let log = log_with(&[
            ("a", "x", "t1", Some("A")),
            ("b", "x", "t2", Some("A")),
            ("c", "x", "t2", Some("B")),
            ("d", "x", "t2", None),
            ("e", "y", "t3", Some("B")),
        ]);
        let mut scoring = LogScoring {
            model_id: None,
            max_fps: 2.0,
            mem_gb: None,
            params_billions: None,
            aggregation: Aggregation::Subtask,
        };
        let r = record_from_log(&log, &scoring, &McqScorer).unwrap();
        assert_eq!(r.model_id, "m");
        assert_eq!(r.mem_gb, 0.5);
        assert_eq!(r.params_billions, 7.0);
        assert!((r.clusters["x"] - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.clusters["y"], 0.0);
        assert!((r.acc - (2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((r.ttft_s - 0.2).abs() < 1e-12);

        scoring.aggregation = Aggregation::Question;
        let r = record_from_log(&log, &scoring, &McqScorer).unwrap();
        assert_eq!(r.clusters["x"], 0.5);
        assert_eq!(r.aggregation, Some(Aggregation::Question));
    }

    #[test]
    fn unanswered_log_is_an_error() {
        let log = log_with(&[("a", "", "", None)]);
        let scoring = LogScoring {
            model_id: None,
            max_fps: 1.0,
            mem_gb: None,
            params_billions: None,
            aggregation: Aggregation::Subtask,
        };
        assert!(matches!(
            record_from_log(&log, &scoring, &McqScorer),
            Err(MetricsError::NoAnswers)
        ));
    }

    #[test]
    fn records_round_trip() {
        let text = "{\"model_id\":\"m\",\"max_fps\":7.0,\"ttft_s\":0.21,\"acc\":0.5378,\"mem_gb\":0.5,\"params_billions\":8.0}\n";
        let recs = parse_records(text, "r").unwrap();
        assert_eq!(records_to_jsonl(&recs), text);
        assert!(parse_records("{\"model_id\":\"m\"}", "r.jsonl")
            .unwrap_err()
            .to_string()
            .starts_with("r.jsonl:1:"));
    }
}
