//! Synchronized-profiling coordination.
//!
//! On a trigger, the coordinator computes unified start/stop iteration IDs
//! from rank-0's current iteration; daemons poll the plan and start/stop
//! profiling at those iteration boundaries. Agreement rests purely on
//! iteration IDs — no timestamp ever crosses a host boundary.
//!
//! Transport is an in-process call (plus an optional line-delimited loopback
//! protocol); the discrete-event simulation below drives the same state
//! machine deterministically for tests.

use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ToolkitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilingPlan {
    #[serde(rename = "start")]
    pub start_iteration: u64,
    #[serde(rename = "stop")]
    pub stop_iteration: u64,
    #[serde(rename = "window_s")]
    pub window_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaemonPhase {
    Idle,
    Armed,
    Profiling,
    Uploading,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DaemonState {
    pub rank: u32,
    pub current_iteration: u64,
    pub phase: DaemonPhase,
}

impl DaemonState {
    pub fn idle(rank: u32) -> Self {
        Self { rank, current_iteration: 0, phase: DaemonPhase::Idle }
    }
}

/// Ack line a daemon emits on every phase change.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AckRecord {
    pub rank: u32,
    pub phase: String,
    pub iter: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CoordError {
    #[error("mean iteration time must be positive, got {0}")]
    NonPositiveIterationTime(f64),
    #[error("rank {rank} first observed the plan at iteration {at}, after start {start}")]
    MissedWindow { rank: u32, at: u64, start: u64 },
    #[error("rank-0 stalled: no iteration report for {elapsed_s:.1}s (> 5x window)")]
    CoordinatorTimeout { elapsed_s: f64 },
}

/// Compute the unified plan: start a few iterations ahead of rank-0 so no
/// poller misses it, stop after enough iterations to cover the window.
pub fn plan_profiling(
    rank0_iteration: u64,
    mean_iteration_seconds: f64,
    cfg: &ToolkitConfig,
) -> Result<ProfilingPlan, CoordError> {
    if mean_iteration_seconds <= 0.0 {
        return Err(CoordError::NonPositiveIterationTime(mean_iteration_seconds));
    }
    let start = rank0_iteration + cfg.lead_iterations;
    let span = (cfg.window_seconds / mean_iteration_seconds).ceil().max(1.0) as u64;
    Ok(ProfilingPlan {
        start_iteration: start,
        stop_iteration: start + span,
        window_seconds: cfg.window_seconds,
    })
}

/// Advance one daemon against the current plan. Transitions are monotone in
/// `current_iteration`; start is inclusive, stop exclusive. On
/// `MissedWindow` the daemon stays Idle.
pub fn daemon_poll(state: &DaemonState, plan: Option<&ProfilingPlan>) -> Result<DaemonState, CoordError> {
    let mut next = *state;
    let Some(plan) = plan else {
        next.phase = match state.phase {
            DaemonPhase::Done => DaemonPhase::Idle,
            other => other,
        };
        return Ok(next);
    };
    let cur = state.current_iteration;
    next.phase = match state.phase {
        DaemonPhase::Idle => {
            if cur > plan.start_iteration {
                return Err(CoordError::MissedWindow {
                    rank: state.rank,
                    at: cur,
                    start: plan.start_iteration,
                });
            } else if cur == plan.start_iteration {
                DaemonPhase::Profiling
            } else {
                DaemonPhase::Armed
            }
        }
        DaemonPhase::Armed => {
            if cur >= plan.stop_iteration {
                return Err(CoordError::MissedWindow {
                    rank: state.rank,
                    at: cur,
                    start: plan.start_iteration,
                });
            } else if cur >= plan.start_iteration {
                DaemonPhase::Profiling
            } else {
                DaemonPhase::Armed
            }
        }
        DaemonPhase::Profiling => {
            if cur >= plan.stop_iteration {
                DaemonPhase::Uploading
            } else {
                DaemonPhase::Profiling
            }
        }
        DaemonPhase::Uploading => DaemonPhase::Done,
        DaemonPhase::Done => DaemonPhase::Done,
    };
    Ok(next)
}

/// Rank-0 stall watchdog: the session aborts when rank-0 has not reported an
/// iteration for five windows.
pub fn rank0_stalled(now_s: f64, last_report_s: f64, window_seconds: f64) -> bool {
    now_s - last_report_s >= 5.0 * window_seconds
}

// --- discrete-event agreement simulation -------------------------------------

/// Configuration of the deterministic polling simulation.
#[derive(Debug, Clone)]
pub struct AgreementSimConfig {
    pub daemons: usize,
    pub seed: u64,
    /// Plan issue time, in iterations of rank-0's clock.
    pub trigger_at_iterations: f64,
    pub mean_iteration_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct AgreementOutcome {
    pub plan: ProfilingPlan,
    /// Per daemon: the iteration range it profiled, when it completed.
    pub profiled: Vec<Option<(u64, u64)>>,
    pub missed: Vec<u32>,
    /// First iteration at which each daemon observed the plan.
    pub first_observed: Vec<u64>,
}

const MICRO: u64 = 1_000_000; // one iteration in simulation ticks

/// Simulate daemons with randomized polling offsets and periods (both below
/// one iteration) against one plan. Deterministic per seed: the event queue
/// is keyed by (tick, rank).
pub fn run_agreement_sim(sim: &AgreementSimConfig, cfg: &ToolkitConfig) -> AgreementOutcome {
    use std::cmp::Reverse;

    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let trigger_tick = (sim.trigger_at_iterations * MICRO as f64) as u64;
    let rank0_iteration = trigger_tick / MICRO;
    let plan = plan_profiling(rank0_iteration, sim.mean_iteration_seconds, cfg)
        .expect("positive iteration time");

    // Per-daemon boundary lag and polling cadence, all below one iteration.
    let lags: Vec<u64> = (0..sim.daemons).map(|_| rng.gen_range(0..MICRO)).collect();
    let periods: Vec<u64> = (0..sim.daemons).map(|_| rng.gen_range(MICRO / 5..=MICRO)).collect();
    let offsets: Vec<u64> = (0..sim.daemons).map(|_| rng.gen_range(0..MICRO)).collect();

    let mut states: Vec<DaemonState> = (0..sim.daemons).map(|r| DaemonState::idle(r as u32)).collect();
    let mut profiled: Vec<Option<(u64, u64)>> = vec![None; sim.daemons];
    let mut entered_profiling: Vec<Option<u64>> = vec![None; sim.daemons];
    let mut first_observed: Vec<u64> = vec![u64::MAX; sim.daemons];
    let mut missed: Vec<u32> = Vec::new();

    let mut queue: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
    for (r, &off) in offsets.iter().enumerate() {
        // First poll at or after the trigger.
        let k = trigger_tick.saturating_sub(off).div_ceil(periods[r]);
        queue.push(Reverse((off + k * periods[r], r as u32)));
    }

    let deadline = trigger_tick + (plan.stop_iteration + 4) * MICRO;
    while let Some(Reverse((tick, rank))) = queue.pop() {
        if tick > deadline {
            break;
        }
        let r = rank as usize;
        if states[r].phase == DaemonPhase::Done {
            continue;
        }
        let local_iter = tick.saturating_sub(lags[r]) / MICRO;
        states[r].current_iteration = local_iter;
        if first_observed[r] == u64::MAX {
            first_observed[r] = local_iter;
        }
        match daemon_poll(&states[r], Some(&plan)) {
            Ok(next) => {
                if next.phase == DaemonPhase::Profiling && entered_profiling[r].is_none() {
                    // Armed daemons begin exactly at the start boundary via
                    // the pre-registered handler.
                    entered_profiling[r] = Some(plan.start_iteration);
                }
                if next.phase == DaemonPhase::Uploading {
                    if let Some(begin) = entered_profiling[r] {
                        profiled[r] = Some((begin, plan.stop_iteration));
                    }
                }
                states[r] = next;
            }
            Err(CoordError::MissedWindow { rank, .. }) => {
                if !missed.contains(&rank) {
                    missed.push(rank);
                }
            }
            Err(_) => unreachable!(),
        }
        queue.push(Reverse((tick + periods[r], rank)));
    }

    AgreementOutcome { plan, profiled, missed, first_observed }
}

// --- loopback wire protocol ---------------------------------------------------

/// Serve one plan to `expected` connecting daemons, collecting their acks.
pub fn serve_plan(
    listener: &TcpListener,
    plan: &ProfilingPlan,
    expected: usize,
) -> std::io::Result<Vec<AckRecord>> {
    let mut acks = Vec::new();
    let plan_line = serde_json::to_string(plan).expect("serializable plan");
    for _ in 0..expected {
        let (mut stream, _) = listener.accept()?;
        stream.write_all(plan_line.as_bytes())?;
        stream.write_all(b"\n")?;
        stream.flush()?;
        let reader = BufReader::new(stream.try_clone()?);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(ack) = serde_json::from_str::<AckRecord>(&line) {
                acks.push(ack);
            }
        }
    }
    Ok(acks)
}

/// Connect to the coordinator, receive the plan, and walk the daemon state
/// machine over the given iteration observations, acking every phase change.
pub fn run_loopback_daemon(
    addr: impl ToSocketAddrs,
    rank: u32,
    iterations: impl IntoIterator<Item = u64>,
) -> std::io::Result<(ProfilingPlan, Vec<DaemonPhase>)> {
    let mut stream = TcpStream::connect(addr)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let plan: ProfilingPlan = serde_json::from_str(line.trim())
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;

    let mut state = DaemonState::idle(rank);
    let mut phases = Vec::new();
    for iter in iterations {
        state.current_iteration = iter;
        match daemon_poll(&state, Some(&plan)) {
            Ok(next) => {
                if next.phase != state.phase {
                    let ack = AckRecord {
                        rank,
                        phase: format!("{:?}", next.phase).to_lowercase(),
                        iter,
                    };
                    let mut text = serde_json::to_string(&ack).expect("serializable ack");
                    text.push('\n');
                    stream.write_all(text.as_bytes())?;
                    phases.push(next.phase);
                }
                state = next;
                if state.phase == DaemonPhase::Done {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    stream.flush()?;
    Ok((plan, phases))
}
