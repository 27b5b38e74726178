//! Per-query timing and answers extracted from an event log.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::session::{EventKind, EventLog};
use crate::time::Timestamp;

/// Everything the log records about one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMeasurement {
    pub query_id: String,
    pub task: String,
    pub cluster: String,
    pub gold: String,
    pub options: Vec<String>,
    pub t0: Timestamp,
    pub t1: Option<Timestamp>,
    pub first_token: Option<Timestamp>,
    pub done: Option<Timestamp>,
    pub final_text: Option<String>,
}

fn span(from: Timestamp, to: Option<Timestamp>) -> Option<f64> {
    to.and_then(|t| t.checked_since(from))
        .map(|d| d.as_secs_f64())
}

impl QueryMeasurement {
    pub fn answered(&self) -> bool {
        self.done.is_some()
    }

    /// Launch to first token, in seconds.
    pub fn ttft_s(&self) -> Option<f64> {
        if !self.answered() {
            return None;
        }
        span(self.t0, self.first_token)
    }

    /// Launch to last token, in seconds.
    pub fn e2e_s(&self) -> Option<f64> {
        span(self.t0, self.done)
    }
}

/// Queries in launch order.
pub fn measure_queries(log: &EventLog) -> Vec<QueryMeasurement> {
    let mut out: Vec<QueryMeasurement> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for e in &log.events {
        match &e.kind {
            EventKind::QueryLaunched {
                query_id,
                task,
                cluster,
                gold,
                options,
            } => {
                index.insert(query_id.clone(), out.len());
                out.push(QueryMeasurement {
                    query_id: query_id.clone(),
                    task: task.clone(),
                    cluster: cluster.clone(),
                    gold: gold.clone(),
                    options: options.clone(),
                    t0: e.t,
                    t1: None,
                    first_token: None,
                    done: None,
                    final_text: None,
                });
            }
            EventKind::QueryEncoded { query_id, .. } => {
                if let Some(&i) = index.get(query_id) {
                    out[i].t1 = Some(e.t);
                }
            }
            EventKind::FirstToken { query_id } => {
                if let Some(&i) = index.get(query_id) {
                    out[i].first_token.get_or_insert(e.t);
                }
            }
            EventKind::AnswerDone {
                query_id,
                final_text,
            } => {
                if let Some(&i) = index.get(query_id) {
                    out[i].done = Some(e.t);
                    out[i].final_text = Some(final_text.clone());
                }
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Percentile with linear interpolation between closest ranks.
/// `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn latency_stats(values: &[f64]) -> Option<LatencyStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(LatencyStats {
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p50: percentile(&v, 50.0),
        p95: percentile(&v, 95.0),
    })
}

/// Per-query values plus their aggregate. Unanswered queries are left out
/// of both and counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub per_query: Vec<(String, f64)>,
    pub unanswered: usize,
    pub stats: Option<LatencyStats>,
}

fn report(log: &EventLog, f: impl Fn(&QueryMeasurement) -> Option<f64>) -> LatencyReport {
    let qs = measure_queries(log);
    let per_query: Vec<(String, f64)> = qs
        .iter()
        .filter_map(|q| f(q).map(|v| (q.query_id.clone(), v)))
        .collect();
    let values: Vec<f64> = per_query.iter().map(|p| p.1).collect();
    LatencyReport {
        unanswered: qs.len() - per_query.len(),
        stats: latency_stats(&values),
        per_query,
    }
}

pub fn measure_ttft(log: &EventLog) -> LatencyReport {
    report(log, QueryMeasurement::ttft_s)
}

pub fn measure_e2e(log: &EventLog) -> LatencyReport {
    report(log, QueryMeasurement::e2e_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert!((percentile(&v, 95.0) - 4.8).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn mean_of_three() {
        let s = latency_stats(&[0.2, 0.4, 0.6]).unwrap();
        assert!((s.mean - 0.4).abs() < 1e-15);
        assert_eq!(s.count, 3);
        assert!(latency_stats(&[]).is_none());
    }
}
