//! Time substrate: nanosecond timestamps, wall and virtual clocks, fixed-rate
//! frame schedules and backlog accounting.
//!
//! All harness-internal times are integer nanoseconds since session start.
//! Seconds (`f64`) only appear at the boundary: on the wire, in event logs and
//! in reports.

use std::fmt;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const NANOS_PER_SEC: f64 = 1e9;

/// A point on the session timeline, in nanoseconds since session start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_nanos(ns: u64) -> Self {
        Timestamp(ns)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    /// Converts seconds to the nearest nanosecond. Negative and non-finite
    /// inputs are rejected.
    pub fn from_secs_f64(secs: f64) -> Result<Self, TimeError> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(TimeError::InvalidSeconds(secs));
        }
        Ok(Timestamp((secs * NANOS_PER_SEC).round() as u64))
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC
    }

    pub fn saturating_add(self, d: Duration) -> Self {
        Timestamp(self.0.saturating_add(d.0))
    }

    /// Elapsed time from `earlier` to `self`, or `None` if `earlier` is later.
    pub fn checked_since(self, earlier: Timestamp) -> Option<Duration> {
        self.0.checked_sub(earlier.0).map(Duration)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.as_secs_f64())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_secs_f64())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let secs = f64::deserialize(d)?;
        Timestamp::from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// A non-negative span of time in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Duration(u64);

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub const fn from_nanos(ns: u64) -> Self {
        Duration(ns)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn from_secs_f64(secs: f64) -> Result<Self, TimeError> {
        Timestamp::from_secs_f64(secs).map(|t| Duration(t.0))
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC
    }

    pub fn to_std(self) -> std::time::Duration {
        std::time::Duration::from_nanos(self.0)
    }

    pub fn saturating_mul(self, n: u64) -> Self {
        Duration(self.0.saturating_mul(n))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeError {
    #[error("invalid number of seconds: {0}")]
    InvalidSeconds(f64),
    #[error("frame rate must be positive and finite, got {0}")]
    InvalidFps(f64),
    #[error("duration must be positive and finite, got {0}")]
    InvalidDuration(f64),
    #[error("virtual clock cannot move backwards from {now} to {requested}")]
    Backwards {
        now: Timestamp,
        requested: Timestamp,
    },
    #[error("emit and encode-done lists differ in length ({emits} vs {dones})")]
    LengthMismatch { emits: usize, dones: usize },
    #[error("frame {index} finished encoding at {done} before it was emitted at {emit}")]
    Causality {
        index: usize,
        emit: Timestamp,
        done: Timestamp,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Wall,
    Virtual,
}

impl fmt::Display for ClockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClockKind::Wall => "wall",
            ClockKind::Virtual => "virtual",
        })
    }
}

impl std::str::FromStr for ClockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(ClockKind::Wall),
            "virtual" => Ok(ClockKind::Virtual),
            other => Err(format!(
                "unknown clock kind `{other}` (expected wall or virtual)"
            )),
        }
    }
}

/// Source of session time. Successive reads never decrease.
pub trait Clock {
    fn kind(&self) -> ClockKind;
    fn now(&self) -> Timestamp;
}

/// Monotonic wall clock anchored at construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn start() -> Self {
        WallClock {
            origin: Instant::now(),
        }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    /// Blocks the calling thread until the clock reads at least `t`.
    pub fn sleep_until(&self, t: Timestamp) {
        let target = self.origin + std::time::Duration::from_nanos(t.as_nanos());
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }
}

impl Clock for WallClock {
    fn kind(&self) -> ClockKind {
        ClockKind::Wall
    }

    fn now(&self) -> Timestamp {
        Timestamp(self.origin.elapsed().as_nanos() as u64)
    }
}

/// Deterministic clock owned by a single scheduler. It only moves when the
/// scheduler calls [`VirtualClock::advance_to`].
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Timestamp>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_to(&self, t: Timestamp) -> Result<(), TimeError> {
        let mut now = self.now.lock().expect("virtual clock poisoned");
        if t < *now {
            return Err(TimeError::Backwards {
                now: *now,
                requested: t,
            });
        }
        *now = t;
        Ok(())
    }
}

impl Clock for VirtualClock {
    fn kind(&self) -> ClockKind {
        ClockKind::Virtual
    }

    fn now(&self) -> Timestamp {
        *self.now.lock().expect("virtual clock poisoned")
    }
}

/// Fixed-rate emission schedule starting at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSchedule {
    fps: f64,
    duration_s: f64,
    emit_times: Vec<Timestamp>,
}

impl FrameSchedule {
    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn emit_times(&self) -> &[Timestamp] {
        &self.emit_times
    }

    pub fn len(&self) -> usize {
        self.emit_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emit_times.is_empty()
    }

    /// Frame interval, i.e. 1 / fps.
    pub fn interval(&self) -> Duration {
        frame_interval(self.fps)
    }

    /// Keeps only the first `n` frames.
    pub fn truncate(&mut self, n: usize) {
        self.emit_times.truncate(n);
    }
}

/// Emission time of frame `index` at rate `fps`, rounded to the nanosecond.
pub fn emit_time(index: u64, fps: f64) -> Timestamp {
    Timestamp((index as f64 * NANOS_PER_SEC / fps).round() as u64)
}

pub fn frame_interval(fps: f64) -> Duration {
    Duration((NANOS_PER_SEC / fps).round() as u64)
}

/// Frames are emitted at i / fps for every i with i / fps < duration.
pub fn build_schedule(fps: f64, duration_s: f64) -> Result<FrameSchedule, TimeError> {
    if !fps.is_finite() || fps <= 0.0 {
        return Err(TimeError::InvalidFps(fps));
    }
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(TimeError::InvalidDuration(duration_s));
    }
    let end = Timestamp::from_secs_f64(duration_s)?;
    let emit_times = (0u64..)
        .map(|i| emit_time(i, fps))
        .take_while(|t| *t < end)
        .collect();
    Ok(FrameSchedule {
        fps,
        duration_s,
        emit_times,
    })
}

/// Queue depth over time: `depth(t) = |{i : emit[i] <= t < done[i]}|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BacklogSeries {
    /// `(t, depth)` change points; depth holds from `t` until the next point.
    steps: Vec<(Timestamp, u32)>,
    max_depth: u32,
}

impl BacklogSeries {
    pub fn steps(&self) -> &[(Timestamp, u32)] {
        &self.steps
    }

    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    /// Depth after every frame has finished encoding. Always zero for a
    /// complete series; kept for reporting symmetry with partial logs.
    pub fn terminal_depth(&self) -> u32 {
        self.steps.last().map_or(0, |s| s.1)
    }

    pub fn depth_at(&self, t: Timestamp) -> u32 {
        match self.steps.partition_point(|(st, _)| *st <= t) {
            0 => 0,
            i => self.steps[i - 1].1,
        }
    }
}

pub fn backlog_series(
    emit_times: &[Timestamp],
    encode_done_times: &[Timestamp],
) -> Result<BacklogSeries, TimeError> {
    if emit_times.len() != encode_done_times.len() {
        return Err(TimeError::LengthMismatch {
            emits: emit_times.len(),
            dones: encode_done_times.len(),
        });
    }
    let mut deltas: Vec<(Timestamp, i64)> = Vec::with_capacity(emit_times.len() * 2);
    for (index, (&emit, &done)) in emit_times.iter().zip(encode_done_times).enumerate() {
        if done < emit {
            return Err(TimeError::Causality { index, emit, done });
        }
        if done > emit {
            deltas.push((emit, 1));
            deltas.push((done, -1));
        }
    }
    deltas.sort_unstable();

    let mut steps: Vec<(Timestamp, u32)> = Vec::new();
    let mut depth: i64 = 0;
    let mut max_depth = 0u32;
    let mut i = 0;
    while i < deltas.len() {
        let t = deltas[i].0;
        while i < deltas.len() && deltas[i].0 == t {
            depth += deltas[i].1;
            i += 1;
        }
        let d = depth as u32;
        max_depth = max_depth.max(d);
        match steps.last() {
            Some(&(_, prev)) if prev == d => {}
            _ => steps.push((t, d)),
        }
    }
    Ok(BacklogSeries { steps, max_depth })
}
