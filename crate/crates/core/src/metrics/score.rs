//! Composite streaming score.
//!
//! ```text
//! score = MaxFPS^w_f * Acc^w_a / (TTFT^w_t * M^w_r),   M = mem_gb * ln(params_billions)
//! ```
//!
//! Acc is a fraction in [0, 1]; TTFT is in seconds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{effective_memory, BudgetError};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("weight {name} must be finite and >= 0, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("weights must sum to 1, got {0}")]
    WeightSum(f64),
    #[error("cannot parse weights `{0}` (expected four comma-separated numbers w_f,w_a,w_t,w_r)")]
    WeightParse(String),
    #[error("unknown scenario `{0}` (expected equal, best-answer, interaction-first, resource-saving or throughput-first)")]
    UnknownScenario(String),
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("accuracy must be a fraction in [0, 1], got {0}")]
    AccuracyRange(f64),
    #[error(transparent)]
    Memory(#[from] BudgetError),
}

/// Exponents on throughput, accuracy, latency and resource use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_f: f64,
    pub w_a: f64,
    pub w_t: f64,
    pub w_r: f64,
}

impl Weights {
    pub const EQUAL: Weights = Weights {
        w_f: 0.25,
        w_a: 0.25,
        w_t: 0.25,
        w_r: 0.25,
    };

    pub fn new(w_f: f64, w_a: f64, w_t: f64, w_r: f64) -> Result<Self, ScoreError> {
        for (name, value) in [("w_f", w_f), ("w_a", w_a), ("w_t", w_t), ("w_r", w_r)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ScoreError::NegativeWeight { name, value });
            }
        }
        let sum = w_f + w_a + w_t + w_r;
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(ScoreError::WeightSum(sum));
        }
        Ok(Weights { w_f, w_a, w_t, w_r })
    }
}

impl fmt::Display for Weights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.w_f, self.w_a, self.w_t, self.w_r)
    }
}

/// `w_f,w_a,w_t,w_r`, e.g. `0.25,0.25,0.25,0.25`.
impl FromStr for Weights {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ScoreError::WeightParse(s.to_string()))?;
        match parts[..] {
            [f, a, t, r] => Weights::new(f, a, t, r),
            _ => Err(ScoreError::WeightParse(s.to_string())),
        }
    }
}

/// The term a deployment scenario emphasizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Throughput,
    Accuracy,
    Latency,
    Resource,
}

/// Emphasized factor gets 0.4, the other three 0.2.
pub fn scenario_weights(target: Factor) -> Weights {
    let mut w = Weights {
        w_f: 0.2,
        w_a: 0.2,
        w_t: 0.2,
        w_r: 0.2,
    };
    match target {
        Factor::Throughput => w.w_f = 0.4,
        Factor::Accuracy => w.w_a = 0.4,
        Factor::Latency => w.w_t = 0.4,
        Factor::Resource => w.w_r = 0.4,
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Equal,
    BestAnswer,
    InteractionFirst,
    ResourceSaving,
    ThroughputFirst,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Equal,
        Scenario::BestAnswer,
        Scenario::InteractionFirst,
        Scenario::ResourceSaving,
        Scenario::ThroughputFirst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Equal => "equal",
            Scenario::BestAnswer => "best-answer",
            Scenario::InteractionFirst => "interaction-first",
            Scenario::ResourceSaving => "resource-saving",
            Scenario::ThroughputFirst => "throughput-first",
        }
    }

    pub fn weights(self) -> Weights {
        match self {
            Scenario::Equal => Weights::EQUAL,
            Scenario::BestAnswer => scenario_weights(Factor::Accuracy),
            Scenario::InteractionFirst => scenario_weights(Factor::Latency),
            Scenario::ResourceSaving => scenario_weights(Factor::Resource),
            Scenario::ThroughputFirst => scenario_weights(Factor::Throughput),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| ScoreError::UnknownScenario(s.to_string()))
    }
}

/// The five quantities the score combines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreInputs {
    pub max_fps: f64,
    /// Fraction in [0, 1].
    pub acc: f64,
    pub ttft_s: f64,
    pub mem_gb: f64,
    pub params_billions: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamingScore {
    pub value: f64,
    /// Accuracy was zero under a positive accuracy weight; the value is the
    /// limit 0.
    pub zero_accuracy: bool,
}

pub fn streaming_score(x: &ScoreInputs, w: &Weights) -> Result<StreamingScore, ScoreError> {
    for (name, value) in [
        ("max_fps", x.max_fps),
        ("ttft_s", x.ttft_s),
        ("mem_gb", x.mem_gb),
    ] {
        if !(value.is_finite() && value > 0.0) {
            return Err(ScoreError::NonPositive { name, value });
        }
    }
    if !(0.0..=1.0).contains(&x.acc) {
        return Err(ScoreError::AccuracyRange(x.acc));
    }
    let m = effective_memory(x.mem_gb, x.params_billions)?;
    if x.acc == 0.0 && w.w_a > 0.0 {
        return Ok(StreamingScore {
            value: 0.0,
            zero_accuracy: true,
        });
    }
    let value = x.max_fps.powf(w.w_f) * x.acc.powf(w.w_a) / (x.ttft_s.powf(w.w_t) * m.powf(w.w_r));
    Ok(StreamingScore {
        value,
        zero_accuracy: false,
    })
}
