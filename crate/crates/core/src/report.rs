//! Score aggregation and leaderboards.
//!
//! Per-task scores roll up into cluster averages and an overall score, each
//! an unweighted mean rounded to two decimals. Leaderboards rank records by
//! streaming score under one or more weightings; equal scores are ordered by
//! model id.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::metrics::{
    kendall_tau, rank_descending, spearman_rho, MetricsRecord, RankError, Scenario, ScoreError,
    Weights,
};

pub const REPORT_SCHEMA: &str = "streameval-report/1";
pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Cluster names of the three-cluster video QA layout.
pub const OVO_CLUSTERS: [&str; 3] = ["realtime", "backward", "forward"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("no subtask scores to average")]
    Empty,
    #[error("cluster `{0}` is missing")]
    MissingCluster(String),
    #[error("unexpected cluster `{0}`")]
    ExtraCluster(String),
    #[error("duplicate model_id `{0}`")]
    DuplicateModel(String),
    #[error("no weightings given")]
    NoScenarios,
    #[error("scoring `{model}`: {source}")]
    Score {
        model: String,
        #[source]
        source: ScoreError,
    },
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Rounds to two decimals, halves away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// Unweighted mean of subtask percentages, to two decimals.
pub fn cluster_average(subtasks: &BTreeMap<String, f64>) -> Result<f64, ReportError> {
    if subtasks.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(round2(mean(subtasks.values().copied())))
}

/// Unweighted mean of the named cluster averages, to two decimals. Every
/// name in `required` must be present and nothing else.
pub fn overall_score(
    clusters: &BTreeMap<String, f64>,
    required: &[&str],
) -> Result<f64, ReportError> {
    if let Some(missing) = required.iter().find(|c| !clusters.contains_key(**c)) {
        return Err(ReportError::MissingCluster(missing.to_string()));
    }
    if let Some(extra) = clusters.keys().find(|k| !required.contains(&k.as_str())) {
        return Err(ReportError::ExtraCluster(extra.clone()));
    }
    if clusters.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(round2(mean(clusters.values().copied())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedWeights {
    pub name: String,
    pub weights: Weights,
}

impl NamedWeights {
    pub fn new(name: impl Into<String>, weights: Weights) -> Self {
        NamedWeights {
            name: name.into(),
            weights,
        }
    }

    pub fn all_scenarios() -> Vec<NamedWeights> {
        Scenario::ALL
            .iter()
            .map(|s| NamedWeights::new(s.name(), s.weights()))
            .collect()
    }
}

impl From<Scenario> for NamedWeights {
    fn from(s: Scenario) -> Self {
        NamedWeights::new(s.name(), s.weights())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardRow {
    pub record: MetricsRecord,
    /// One score per weighting, in leaderboard order.
    pub scores: Vec<f64>,
    pub ranks: Vec<usize>,
    pub zero_accuracy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaderboard {
    pub dataset: String,
    pub weightings: Vec<NamedWeights>,
    /// Sorted by rank under the first weighting.
    pub rows: Vec<LeaderboardRow>,
}

pub fn build_leaderboard(
    records: &[MetricsRecord],
    weightings: Vec<NamedWeights>,
    dataset: impl Into<String>,
) -> Result<Leaderboard, ReportError> {
    if weightings.is_empty() {
        return Err(ReportError::NoScenarios);
    }
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.model_id.as_str()) {
            return Err(ReportError::DuplicateModel(r.model_id.clone()));
        }
    }
    let mut rows: Vec<LeaderboardRow> = Vec::with_capacity(records.len());
    for r in records {
        let mut scores = Vec::with_capacity(weightings.len());
        let mut zero_accuracy = false;
        for w in &weightings {
            let s = r
                .streaming_score(&w.weights)
                .map_err(|source| ReportError::Score {
                    model: r.model_id.clone(),
                    source,
                })?;
            zero_accuracy |= s.zero_accuracy;
            scores.push(s.value);
        }
        rows.push(LeaderboardRow {
            record: r.clone(),
            scores,
            ranks: Vec::new(),
            zero_accuracy,
        });
    }
    for k in 0..weightings.len() {
        let keyed: Vec<(&str, f64)> = rows
            .iter()
            .map(|r| (r.record.model_id.as_str(), r.scores[k]))
            .collect();
        let ranks = rank_descending(&keyed);
        for (row, rank) in rows.iter_mut().zip(ranks) {
            row.ranks.push(rank);
        }
    }
    rows.sort_by_key(|r| r.ranks[0]);
    Ok(Leaderboard {
        dataset: dataset.into(),
        weightings,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Jsonl,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            other => Err(format!(
                "unknown report format `{other}` (expected markdown, csv or jsonl)"
            )),
        }
    }
}

fn f2(x: f64) -> String {
    format!("{:.2}", round2(x))
}

/// Fixed leading columns, then a score and rank column per weighting.
fn columns(lb: &Leaderboard) -> (Vec<String>, Vec<String>) {
    let mut pretty: Vec<String> = [
        "Model",
        "MaxFPS",
        "TTFT (s)",
        "Acc (%)",
        "Mem (GB)",
        "Params (B)",
    ]
    .map(String::from)
    .to_vec();
    let mut plain: Vec<String> = [
        "model_id",
        "max_fps",
        "ttft_s",
        "acc_pct",
        "mem_gb",
        "params_billions",
    ]
    .map(String::from)
    .to_vec();
    for w in &lb.weightings {
        pretty.push(format!("Score ({})", w.name));
        pretty.push(format!("Rank ({})", w.name));
        plain.push(format!("score_{}", w.name));
        plain.push(format!("rank_{}", w.name));
    }
    (pretty, plain)
}

fn cells(lb: &Leaderboard, row: &LeaderboardRow) -> Vec<String> {
    let r = &row.record;
    let mut out = vec![
        r.model_id.clone(),
        f2(r.max_fps),
        f2(r.ttft_s),
        f2(r.acc * 100.0),
        f2(r.mem_gb),
        f2(r.params_billions),
    ];
    for k in 0..lb.weightings.len() {
        out.push(f2(row.scores[k]));
        out.push(row.ranks[k].to_string());
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders the leaderboard. Numbers are fixed at two decimals and accuracy
/// is shown as a percentage.
pub fn emit_report(lb: &Leaderboard, format: ReportFormat) -> String {
    let (pretty, plain) = columns(lb);
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", pretty.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(pretty.len()));
            for row in &lb.rows {
                let _ = writeln!(out, "| {} |", cells(lb, row).join(" | "));
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "{}", plain.join(","));
            for row in &lb.rows {
                let line: Vec<String> = cells(lb, row).iter().map(|c| csv_field(c)).collect();
                let _ = writeln!(out, "{}", line.join(","));
            }
        }
        ReportFormat::Jsonl => {
            let header = json!({
                "schema": REPORT_SCHEMA,
                "harness_version": HARNESS_VERSION,
                "dataset": lb.dataset,
                "weightings": lb.weightings,
            });
            let _ = writeln!(out, "{header}");
            for row in &lb.rows {
                let r = &row.record;
                let mut scores = serde_json::Map::new();
                let mut ranks = serde_json::Map::new();
                for (k, w) in lb.weightings.iter().enumerate() {
                    scores.insert(w.name.clone(), json!(round2(row.scores[k])));
                    ranks.insert(w.name.clone(), json!(row.ranks[k]));
                }
                let line = json!({
                    "model_id": r.model_id,
                    "max_fps": round2(r.max_fps),
                    "ttft_s": round2(r.ttft_s),
                    "acc_pct": round2(r.acc * 100.0),
                    "mem_gb": round2(r.mem_gb),
                    "params_billions": round2(r.params_billions),
                    "scores": scores,
                    "ranks": ranks,
                    "zero_accuracy": row.zero_accuracy,
                });
                let _ = writeln!(out, "{line}");
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCorrelation {
    pub a: String,
    pub b: String,
    pub spearman: f64,
    pub kendall: f64,
}

/// Rank agreement between every pair of weightings, from the scores.
pub fn rank_stability(lb: &Leaderboard) -> Result<Vec<PairCorrelation>, ReportError> {
    let n = lb.weightings.len();
    let column = |k: usize| -> Vec<f64> { lb.rows.iter().map(|r| r.scores[k]).collect() };
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (x, y) = (column(i), column(j));
            out.push(PairCorrelation {
                a: lb.weightings[i].name.clone(),
                b: lb.weightings[j].name.clone(),
                spearman: spearman_rho(&x, &y)?,
                kendall: kendall_tau(&x, &y)?,
            });
        }
    }
    Ok(out)
}

pub fn emit_stability(pairs: &[PairCorrelation], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str(
                "| Weighting A | Weighting B | Spearman rho | Kendall tau |\n|---|---|---|---|\n",
            );
            for p in pairs {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.3} | {:.3} |",
                    p.a, p.b, p.spearman, p.kendall
                );
            }
        }
        ReportFormat::Csv => {
            out.push_str("a,b,spearman,kendall\n");
            for p in pairs {
                let _ = writeln!(out, "{},{},{:.3},{:.3}", p.a, p.b, p.spearman, p.kendall);
            }
        }
        ReportFormat::Jsonl => {
            for p in pairs {
                let _ = writeln!(
                    out,
                    "{}",
                    serde_json::to_string(p).expect("pair serializes")
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn cluster_average_examples() {
        let qwen = map(&[
            ("OCR", 91.95),
            ("ACR", 78.90),
            ("ATR", 79.31),
            ("STU", 67.98),
            ("FPD", 73.27),
            ("OJR", 80.98),
        ]);
        assert_eq!(cluster_average(&qwen).unwrap(), 78.73);
        assert_eq!(cluster_average(&map(&[("x", 42.5)])).unwrap(), 42.5);
        assert_eq!(
            cluster_average(&map(&[("a", 0.0), ("b", 100.0)])).unwrap(),
            50.0
        );
        assert_eq!(cluster_average(&BTreeMap::new()), Err(ReportError::Empty));
    }

    #[test]
    fn overall_examples() {
        let c = |r, b, f| map(&[("realtime", r), ("backward", b), ("forward", f)]);
        assert_eq!(
            overall_score(&c(78.73, 51.82, 43.46), &OVO_CLUSTERS).unwrap(),
            58.00
        );
        assert_eq!(
            overall_score(&c(74.31, 40.89, 46.14), &OVO_CLUSTERS).unwrap(),
            53.78
        );
        assert_eq!(
            overall_score(&c(61.0, 61.0, 61.0), &OVO_CLUSTERS).unwrap(),
            61.0
        );
        let partial = map(&[("realtime", 1.0), ("backward", 2.0)]);
        assert_eq!(
            overall_score(&partial, &OVO_CLUSTERS),
            Err(ReportError::MissingCluster("forward".into()))
        );
    }

    fn rec(id: &str, fps: f64) -> MetricsRecord {
        MetricsRecord {
            model_id: id.into(),
            max_fps: fps,
            ttft_s: 0.2,
            e2e_s: None,
            acc: 0.5,
            mem_gb: 0.5,
            params_billions: 7.0,
            tasks: BTreeMap::new(),
            clusters: BTreeMap::new(),
            aggregation: None,
        }
    }

    #[test]
    fn ties_rank_by_model_id() {
        let lb = build_leaderboard(
            &[rec("zeta", 4.0), rec("alpha", 4.0), rec("mid", 8.0)],
            vec![Scenario::Equal.into()],
            "d",
        )
        .unwrap();
        let order: Vec<&str> = lb.rows.iter().map(|r| r.record.model_id.as_str()).collect();
        assert_eq!(order, vec!["mid", "alpha", "zeta"]);
        assert_eq!(
            lb.rows.iter().map(|r| r.ranks[0]).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn empty_board_is_header_only() {
        let lb = build_leaderboard(&[], vec![Scenario::Equal.into()], "d").unwrap();
        let md = emit_report(&lb, ReportFormat::Markdown);
        assert_eq!(md.lines().count(), 2);
        assert_eq!(
            emit_report(&lb, ReportFormat::Csv),
            "model_id,max_fps,ttft_s,acc_pct,mem_gb,params_billions,score_equal,rank_equal\n"
        );
        assert_eq!(emit_report(&lb, ReportFormat::Jsonl).lines().count(), 1);
    }

    #[test]
    fn one_row_board() {
        let lb = build_leaderboard(&[rec("m", 7.0)], vec![Scenario::Equal.into()], "d").unwrap();
        let csv = emit_report(&lb, ReportFormat::Csv);
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("m,7.00,0.20,50.00,0.50,7.00,"), "{row}");
        assert!(row.ends_with(",1"));
        assert_eq!(
            emit_report(&lb, ReportFormat::Markdown),
            emit_report(&lb, ReportFormat::Markdown)
        );
    }

    #[test]
    fn duplicate_models_rejected() {
        assert!(matches!(
            build_leaderboard(
                &[rec("m", 1.0), rec("m", 2.0)],
                vec![Scenario::Equal.into()],
                "d"
            ),
            Err(ReportError::DuplicateModel(_))
        ));
    }

    #[test]
    fn coinciding_weightings_correlate_perfectly() {
        let recs = [rec("a", 1.0), rec("b", 2.0), rec("c", 3.0)];
        let lb = build_leaderboard(
            &recs,
            vec![
                NamedWeights::new("x", Weights::EQUAL),
                NamedWeights::new("y", Weights::EQUAL),
            ],
            "d",
        )
        .unwrap();
        let pairs = rank_stability(&lb).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].spearman, pairs[0].kendall), (1.0, 1.0));
    }
}
