//! MaxFPS probe: the highest frame rate a worker sustains without a
//! persistent encode backlog.
//!
//! A trial streams frames (no queries) at a fixed rate for a fixed duration.
//! It passes when the backlog never exceeds the bound and is empty one frame
//! interval after the last emission. Candidate rates follow the reporting
//! resolution: 0.01 to 0.99 in steps of 0.01, then whole numbers up to 64.
//! The probe bisects over that grid, so it assumes a worker that sustains a
//! rate also sustains every lower one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Mode, WorkerLink};
use crate::session::{
    run_session, AbortReason, EventKind, EventLog, SessionConfig, SessionError, SessionPlan,
    StreamPlan, SyntheticStream,
};
use crate::time::{backlog_series, build_schedule, frame_interval, ClockKind, Timestamp};

pub type FactoryError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("could not start worker: {0}")]
    Factory(FactoryError),
    #[error("trial at {fps} fps failed: {source}")]
    Trial {
        fps: f64,
        #[source]
        source: SessionError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub trial_duration_s: f64,
    /// Largest backlog a sustainable trial may reach.
    pub max_backlog: u64,
    pub clock: ClockKind,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            trial_duration_s: 60.0,
            max_backlog: 3,
            clock: ClockKind::Virtual,
        }
    }
}

/// Probe candidates in hundredths of a frame per second, ascending.
pub fn candidate_grid() -> Vec<u32> {
    (1..100).chain((1..=64).map(|n| n * 100)).collect()
}

pub const GRID_MIN_FPS: f64 = 0.01;
pub const GRID_MAX_FPS: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub fps: f64,
    pub frames: u64,
    pub max_backlog: u64,
    pub terminal_backlog: u64,
    pub sustainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ProbeOutcome {
    Sustained {
        max_fps: f64,
    },
    /// Even the grid maximum was sustained; the true rate may be higher.
    Saturated {
        max_fps: f64,
    },
    /// Not even the grid minimum was sustained.
    BelowGrid,
}

impl ProbeOutcome {
    pub fn max_fps(&self) -> Option<f64> {
        match *self {
            ProbeOutcome::Sustained { max_fps } | ProbeOutcome::Saturated { max_fps } => {
                Some(max_fps)
            }
            ProbeOutcome::BelowGrid => None,
        }
    }
}

impl fmt::Display for ProbeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeOutcome::Sustained { max_fps } => write!(f, "{max_fps}"),
            ProbeOutcome::Saturated { max_fps } => write!(f, ">= {max_fps} (saturated)"),
            ProbeOutcome::BelowGrid => write!(f, "< {GRID_MIN_FPS} (below grid minimum)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub outcome: ProbeOutcome,
    pub trials: Vec<TrialResult>,
}

/// Backlog figures of a frames-only log.
pub fn trial_backlog(log: &EventLog) -> (u64, u64) {
    let mut emits = Vec::new();
    let mut dones = Vec::new();
    for e in &log.events {
        match e.kind {
            EventKind::FrameEmitted { frame_id } => {
                if emits.len() <= frame_id as usize {
                    emits.resize(frame_id as usize + 1, Timestamp::ZERO);
                }
                emits[frame_id as usize] = e.t;
            }
            EventKind::FrameEncoded { frame_id, .. } => {
                if dones.len() <= frame_id as usize {
                    dones.resize(frame_id as usize + 1, Timestamp::ZERO);
                }
                dones[frame_id as usize] = e.t;
            }
            _ => {}
        }
    }
    let Some(&last) = emits.last() else {
        return (0, 0);
    };
    let Ok(series) = backlog_series(&emits, &dones) else {
        return (u64::MAX, u64::MAX);
    };
    let t_end = last.saturating_add(frame_interval(log.header.fps));
    (series.max_depth() as u64, series.depth_at(t_end) as u64)
}

/// Runs one fixed-rate trial against a fresh worker.
pub fn run_trial<F>(
    factory: &mut F,
    fps: f64,
    config: &ProbeConfig,
) -> Result<TrialResult, ProbeError>
where
    F: FnMut() -> Result<WorkerLink, FactoryError>,
{
    let frames = build_schedule(fps, config.trial_duration_s)
        .map_err(|e| ProbeError::Config(e.to_string()))?
        .len() as u64;
    let stream = StreamPlan::synthetic(SyntheticStream {
        frame_count: frames,
        fps,
        seed: 0,
    })
    .map_err(|e| ProbeError::Config(e.to_string()))?;
    let plan = SessionPlan::new(stream, Vec::new());
    let mut session = SessionConfig::new(format!("probe-{fps}"), Mode::Native, config.clock);
    // Stop as soon as the bound is crossed; the trial has failed by then.
    session.max_queue = config.max_backlog;
    let link = factory().map_err(ProbeError::Factory)?;
    let (max_backlog, terminal_backlog) = match run_session(&session, &plan, link) {
        Ok(out) => trial_backlog(&out.log),
        Err(SessionError::Aborted {
            reason: AbortReason::QueueOverflow { depth, .. },
            ..
        }) => (depth, depth),
        Err(source) => return Err(ProbeError::Trial { fps, source }),
    };
    Ok(TrialResult {
        fps,
        frames,
        max_backlog,
        terminal_backlog,
        sustainable: max_backlog <= config.max_backlog && terminal_backlog == 0,
    })
}

pub fn probe_max_fps<F>(mut factory: F, config: &ProbeConfig) -> Result<ProbeResult, ProbeError>
where
    F: FnMut() -> Result<WorkerLink, FactoryError>,
{
    if !(config.trial_duration_s.is_finite() && config.trial_duration_s > 0.0) {
        return Err(ProbeError::Config(format!(
            "trial_duration_s must be positive, got {}",
            config.trial_duration_s
        )));
    }
    let grid = candidate_grid();
    let fps_at = |i: usize| grid[i] as f64 / 100.0;
    let mut trials = Vec::new();
    let mut trial = |i: usize, trials: &mut Vec<TrialResult>| -> Result<bool, ProbeError> {
        let r = run_trial(&mut factory, fps_at(i), config)?;
        log::debug!("probe trial {r:?}");
        trials.push(r);
        Ok(r.sustainable)
    };

    let top = grid.len() - 1;
    if !trial(0, &mut trials)? {
        return Ok(ProbeResult {
            outcome: ProbeOutcome::BelowGrid,
            trials,
        });
    }
    if trial(top, &mut trials)? {
        return Ok(ProbeResult {
            outcome: ProbeOutcome::Saturated {
                max_fps: fps_at(top),
            },
            trials,
        });
    }
    // Invariant: grid[lo] sustained, grid[hi] not.
    let (mut lo, mut hi) = (0, top);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if trial(mid, &mut trials)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ProbeResult {
        outcome: ProbeOutcome::Sustained {
            max_fps: fps_at(lo),
        },
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{MockConfig, MockWorker};

    fn mock_factory(cost: f64) -> impl FnMut() -> Result<WorkerLink, FactoryError> {
        move || {
            let w = MockWorker::new(MockConfig {
                encode_cost_s: cost,
                ..Default::default()
            })?;
            Ok(w.into_link())
        }
    }

    fn probe(cost: f64) -> ProbeOutcome {
        probe_max_fps(mock_factory(cost), &ProbeConfig::default())
            .unwrap()
            .outcome
    }

    #[test]
    fn grid_shape() {
        let g = candidate_grid();
        assert_eq!(g.len(), 99 + 64);
        assert_eq!(g[0], 1);
        assert_eq!(g[98], 99);
        assert_eq!(g[99], 100);
        assert_eq!(*g.last().unwrap(), 6400);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn calibrated_rates() {
        assert_eq!(probe(0.125), ProbeOutcome::Sustained { max_fps: 8.0 });
        assert_eq!(probe(1.0), ProbeOutcome::Sustained { max_fps: 1.0 });
    }

    #[test]
    fn free_encoder_saturates() {
        assert_eq!(probe(0.0), ProbeOutcome::Saturated { max_fps: 64.0 });
    }

    #[test]
    fn hopeless_encoder_is_below_grid() {
        // One frame per 100 s cannot be encoded within its own interval.
        let outcome = probe_max_fps(
            mock_factory(150.0),
            &ProbeConfig {
                trial_duration_s: 300.0,
                ..Default::default()
            },
        )
        .unwrap()
        .outcome;
        assert_eq!(outcome, ProbeOutcome::BelowGrid);
    }
}
