//! Training-iteration degradation detection from dataloader/optimizer marker
//! events.
//!
//! The detector first LEARNS the per-iteration marker sequence (confirmed
//! after M identical consecutive observations), then MATCHES the stream
//! against it, recording each iteration's duration. It raises Slowdown when
//! the mean of the recent N durations exceeds the episode minimum by more
//! than the configured percentage, and Blocked when the stream goes quiet
//! mid-sequence for the configured multiple of the mean iteration time.
//! K consecutive events without a completed match force re-learning.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ToolkitConfig;
use crate::TimeNs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    #[serde(rename = "next")]
    DataloaderNext,
    #[serde(rename = "step")]
    OptimizerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerEvent {
    #[serde(rename = "k")]
    pub kind: MarkerKind,
    pub ts: TimeNs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorPhase {
    Learning,
    Matching,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    Slowdown {
        at: TimeNs,
        mean_duration_ns: f64,
        min_duration_ns: TimeNs,
    },
    Blocked {
        at: TimeNs,
        gap_ns: TimeNs,
        mean_duration_ns: f64,
    },
}

impl Trigger {
    pub fn at(&self) -> TimeNs {
        match self {
            Trigger::Slowdown { at, .. } | Trigger::Blocked { at, .. } => *at,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectorError {
    #[error("event at {ts} precedes the previous event at {prev}")]
    OutOfOrderEvent { ts: TimeNs, prev: TimeNs },
}

#[derive(Debug, Clone, Copy)]
pub struct DetectorConfig {
    /// M: identical consecutive sequences confirming the iteration model.
    pub confirm: u32,
    /// N: ring-buffer size of recent durations.
    pub window: u32,
    /// K: events without a completed match before re-learning.
    pub relearn: u32,
    pub slowdown_percent: f64,
    pub blocked_multiplier: f64,
    pub cooldown_ns: TimeNs,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            confirm: 10,
            window: 50,
            relearn: 200,
            slowdown_percent: 5.0,
            blocked_multiplier: 5.0,
            cooldown_ns: 600_000_000_000,
        }
    }
}

impl DetectorConfig {
    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        Self {
            confirm: cfg.detector_confirm,
            window: cfg.detector_window,
            relearn: cfg.detector_relearn,
            slowdown_percent: cfg.slowdown_percent,
            blocked_multiplier: cfg.blocked_multiplier,
            cooldown_ns: (cfg.trigger_cooldown_seconds * 1e9) as TimeNs,
        }
    }
}

/// Deterministic state machine; same event stream, same trigger sequence.
#[derive(Debug, Clone)]
pub struct DegradationDetector {
    cfg: DetectorConfig,
    phase: DetectorPhase,
    last_ts: Option<TimeNs>,

    // Learning state: the current candidate and the last finalized sequence.
    candidate: Vec<MarkerKind>,
    candidate_start: TimeNs,
    reference: Option<Vec<MarkerKind>>,
    confirmed_count: u32,

    // Matching state.
    sequence: Vec<MarkerKind>,
    position: usize,
    match_start: TimeNs,
    durations: VecDeque<TimeNs>,
    episode_min: Option<TimeNs>,
    events_since_match: u32,

    last_trigger: Option<TimeNs>,
    blocked_latched: bool,
}

impl DegradationDetector {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self {
            cfg,
            phase: DetectorPhase::Learning,
            last_ts: None,
            candidate: Vec::new(),
            candidate_start: 0,
            reference: None,
            confirmed_count: 0,
            sequence: Vec::new(),
            position: 0,
            match_start: 0,
            durations: VecDeque::new(),
            episode_min: None,
            events_since_match: 0,
            last_trigger: None,
            blocked_latched: false,
        }
    }

    pub fn phase(&self) -> DetectorPhase {
        self.phase
    }

    pub fn learned_sequence(&self) -> Option<&[MarkerKind]> {
        if self.phase == DetectorPhase::Matching {
            Some(&self.sequence)
        } else {
            None
        }
    }

    pub fn recorded_durations(&self) -> &VecDeque<TimeNs> {
        &self.durations
    }

    pub fn episode_min(&self) -> Option<TimeNs> {
        self.episode_min
    }

    fn mean_duration(&self) -> Option<f64> {
        if self.durations.is_empty() {
            return None;
        }
        let sum: i128 = self.durations.iter().map(|&d| d as i128).sum();
        Some(sum as f64 / self.durations.len() as f64)
    }

    fn cooled_down(&self, now: TimeNs) -> bool {
        match self.last_trigger {
            Some(t) => now - t >= self.cfg.cooldown_ns,
            None => true,
        }
    }

    fn enter_learning(&mut self) {
        self.phase = DetectorPhase::Learning;
        self.candidate.clear();
        self.reference = None;
        self.confirmed_count = 0;
        self.sequence.clear();
        self.position = 0;
        self.durations.clear();
        self.episode_min = None;
        self.events_since_match = 0;
        self.blocked_latched = false;
    }

    fn enter_matching(&mut self, sequence: Vec<MarkerKind>, first_duration: TimeNs, at: TimeNs) {
        self.phase = DetectorPhase::Matching;
        self.sequence = sequence;
        self.position = 0;
        self.durations.clear();
        self.episode_min = None;
        self.events_since_match = 0;
        self.blocked_latched = false;
        self.record_duration(first_duration, at);
    }

    fn record_duration(&mut self, duration: TimeNs, _at: TimeNs) {
        if self.durations.len() == self.cfg.window as usize {
            self.durations.pop_front();
        }
        self.durations.push_back(duration);
        self.episode_min = Some(match self.episode_min {
            Some(m) => m.min(duration),
            None => duration,
        });
    }

    fn slowdown_check(&mut self, at: TimeNs) -> Option<Trigger> {
        if self.durations.len() < self.cfg.window as usize {
            return None;
        }
        let mean = self.mean_duration()?;
        let min = self.episode_min?;
        let threshold = (1.0 + self.cfg.slowdown_percent / 100.0) * min as f64;
        if mean > threshold && self.cooled_down(at) {
            self.last_trigger = Some(at);
            return Some(Trigger::Slowdown { at, mean_duration_ns: mean, min_duration_ns: min });
        }
        None
    }

    /// Feed one marker event. At most one trigger or state transition results
    /// from a call.
    pub fn feed(&mut self, ev: MarkerEvent) -> Result<Option<Trigger>, DetectorError> {
        if let Some(prev) = self.last_ts {
            if ev.ts < prev {
                return Err(DetectorError::OutOfOrderEvent { ts: ev.ts, prev });
            }
        }
        self.last_ts = Some(ev.ts);
        self.blocked_latched = false;

        match self.phase {
            DetectorPhase::Learning => {
                self.learn(ev);
                Ok(None)
            }
            DetectorPhase::Matching => Ok(self.matching(ev)),
        }
    }

    fn learn(&mut self, ev: MarkerEvent) {
        // A candidate runs from a DataloaderNext to the last OptimizerStep
        // before the next DataloaderNext; the arrival of that next marker
        // finalizes it.
        if ev.kind == MarkerKind::DataloaderNext {
            if self.candidate.last() == Some(&MarkerKind::OptimizerStep) {
                let finished = std::mem::take(&mut self.candidate);
                if self.reference.as_deref() == Some(finished.as_slice()) {
                    self.confirmed_count += 1;
                } else {
                    self.reference = Some(finished);
                    self.confirmed_count = 1;
                }
            }
            if self.candidate.is_empty() {
                self.candidate_start = ev.ts;
            }
            self.candidate.push(ev.kind);
        } else if !self.candidate.is_empty() {
            self.candidate.push(ev.kind);
        } // leading steps before any next are discarded

        // Tentative confirmation: a candidate currently ending in a step and
        // equal to the reference counts without waiting for the boundary.
        if self.candidate.first() == Some(&MarkerKind::DataloaderNext)
            && self.candidate.last() == Some(&MarkerKind::OptimizerStep)
            && self.reference.as_deref() == Some(self.candidate.as_slice())
            && self.confirmed_count + 1 >= self.cfg.confirm
        {
            let seq = std::mem::take(&mut self.candidate);
            let duration = ev.ts - self.candidate_start;
            self.enter_matching(seq, duration, ev.ts);
        }
    }

    fn matching(&mut self, ev: MarkerEvent) -> Option<Trigger> {
        let expected = self.sequence[self.position];
        if ev.kind == expected {
            if self.position == 0 {
                self.match_start = ev.ts;
            }
            self.position += 1;
            if self.position == self.sequence.len() {
                self.position = 0;
                self.events_since_match = 0;
                let duration = ev.ts - self.match_start;
                self.record_duration(duration, ev.ts);
                return self.slowdown_check(ev.ts);
            }
            self.events_since_match += 1;
        } else {
            self.events_since_match += 1;
            // Resync: the stray event may itself start a fresh iteration.
            if ev.kind == self.sequence[0] {
                self.position = 1;
                self.match_start = ev.ts;
            } else {
                self.position = 0;
            }
        }
        if self.events_since_match >= self.cfg.relearn {
            self.enter_learning();
        }
        None
    }

    /// Probe for blockage at `now`. Fires iff the sequence is mid-match and
    /// the stream has been quiet for at least the configured multiple of the
    /// mean iteration duration. Idempotent until the next event arrives.
    pub fn tick(&mut self, now: TimeNs) -> Option<Trigger> {
        if self.phase != DetectorPhase::Matching || self.blocked_latched || self.position == 0 {
            return None;
        }
        let mean = self.mean_duration()?;
        let last = self.last_ts?;
        let gap = now - last;
        if gap as f64 >= self.cfg.blocked_multiplier * mean && self.cooled_down(now) {
            self.blocked_latched = true;
            self.last_trigger = Some(now);
            return Some(Trigger::Blocked { at: now, gap_ns: gap, mean_duration_ns: mean });
        }
        None
    }
}

/// Replay a recorded marker stream, probing for blockage before each event.
/// Returns every trigger in order.
pub fn replay(
    detector: &mut DegradationDetector,
    events: impl IntoIterator<Item = MarkerEvent>,
) -> Result<Vec<Trigger>, DetectorError> {
    let mut triggers = Vec::new();
    for ev in events {
        if let Some(t) = detector.tick(ev.ts) {
            triggers.push(t);
        }
        if let Some(t) = detector.feed(ev)? {
            triggers.push(t);
        }
    }
    Ok(triggers)
}
