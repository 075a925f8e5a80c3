//! Shared test oracles and trace generators.
//!
//! The oracles deliberately re-derive results from the definitions by
//! brute force — per-nanosecond evaluation of the critical-path rule and
//! exhaustive enumeration of the gap-search triples — and stay independent
//! of the implementation paths they check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracediag_core::critical::priority;
use tracediag_core::trace::{CommScope, FunctionId, FunctionKind, WorkerId, WorkerTrace};
use tracediag_core::TimeNs;

/// Evaluate the critical-path definition at every integer nanosecond of the
/// window and merge the resulting runs into intervals per function index.
pub fn critical_oracle(trace: &WorkerTrace) -> Vec<Vec<(TimeNs, TimeNs)>> {
    let (w0, w1) = trace.window;
    let nf = trace.functions.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); trace.events.len()];
    for (i, e) in trace.events.iter().enumerate() {
        if let Some(p) = e.parent {
            children[p as usize].push(i);
        }
    }
    let mut out = vec![Vec::new(); nf];
    let mut open: Vec<Option<TimeNs>> = vec![None; nf];
    let mut active = vec![false; trace.events.len()];
    for t in w0..w1 {
        for (i, e) in trace.events.iter().enumerate() {
            active[i] = e.start <= t && t < e.end;
        }
        let mut max_level: Option<u8> = None;
        for (i, e) in trace.events.iter().enumerate() {
            if active[i] {
                let l = priority(trace.function(e.func).kind);
                max_level = Some(max_level.map_or(l, |m| m.max(l)));
            }
        }
        let mut critical_now = vec![false; nf];
        for (i, e) in trace.events.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let f = trace.function(e.func);
            let level = priority(f.kind);
            if max_level.unwrap() > level {
                continue;
            }
            if f.kind == FunctionKind::PythonFunction {
                if !e.is_training_thread {
                    continue;
                }
                if children[i].iter().any(|&c| active[c]) {
                    continue;
                }
            }
            critical_now[e.func as usize] = true;
        }
        for f in 0..nf {
            match (critical_now[f], open[f]) {
                (true, None) => open[f] = Some(t),
                (false, Some(s)) => {
                    out[f].push((s, t));
                    open[f] = None;
                }
                _ => {}
            }
        }
    }
    for f in 0..nf {
        if let Some(s) = open[f] {
            out[f].push((s, w1));
        }
    }
    out
}

/// Exhaustive search of the critical-duration definition: the first gap
/// tolerance g (ascending) admitting a window with enough mass and no run of
/// more than g zeros, taking the shortest window, earliest on ties.
/// Returns (g, start, end) with an inclusive end, or None for empty or
/// massless input.
pub fn critical_span_oracle(
    values: &[f64],
    mass_fraction: f64,
    zero_eps: f64,
) -> Option<(usize, usize, usize)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let threshold = mass_fraction * total;
    for g in 0..=n {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            let mut sum = 0.0;
            let mut run = 0usize;
            let mut max_run = 0usize;
            for (j, &v) in values.iter().enumerate().skip(i) {
                sum += v;
                if v <= zero_eps {
                    run += 1;
                    max_run = max_run.max(run);
                } else {
                    run = 0;
                }
                if sum >= threshold && max_run <= g {
                    let len = j - i + 1;
                    if best.is_none_or(|(bi, bj)| len < bj - bi + 1) {
                        best = Some((i, j));
                    }
                    break; // longer windows from this i are never shorter
                }
                if max_run > g && sum >= threshold {
                    break; // more j only grows the run
                }
            }
        }
        if let Some((i, j)) = best {
            return Some((g, i, j));
        }
    }
    unreachable!("the whole array is always feasible at g = n when mass exists")
}

const GPU_NAMES: [&str; 3] = ["k0", "k1", "k2"];
const MEM_NAMES: [&str; 2] = ["m0", "m1"];

fn random_function(rng: &mut ChaCha8Rng) -> FunctionId {
    match rng.gen_range(0..4) {
        0 => FunctionId::gpu(GPU_NAMES[rng.gen_range(0..GPU_NAMES.len())]),
        1 => FunctionId::memory(MEM_NAMES[rng.gen_range(0..MEM_NAMES.len())]),
        2 => {
            let scope = if rng.gen_bool(0.5) { CommScope::IntraWorker } else { CommScope::InterWorker };
            FunctionId::comm(if rng.gen_bool(0.5) { "c0" } else { "c1" }, scope)
        }
        _ => {
            let depth = rng.gen_range(1..=3);
            let stack: Vec<String> = (0..depth).map(|d| format!("f{d}.py:fn{d}")).collect();
            FunctionId::python(format!("p{}", rng.gen_range(0..3)), stack)
        }
    }
}

/// Adversarial trace: arbitrary overlaps across a handful of threads,
/// nesting reconstructed from containment.
pub fn random_trace(seed: u64, max_events: usize) -> WorkerTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window: (TimeNs, TimeNs) = (0, 1_000);
    let mut trace = WorkerTrace::new(WorkerId(0), window);
    let n = rng.gen_range(1..=max_events);
    for _ in 0..n {
        let f = random_function(&mut rng);
        let start = rng.gen_range(0..window.1 - 1);
        let len = rng.gen_range(1..=300).min(window.1 - start);
        let thread = rng.gen_range(0..3);
        let training = thread == 0;
        trace.push_event(f, start, start + len, thread, training);
    }
    trace.finalize().expect("generated trace is valid");
    trace
}

/// Layered trace: python nesting on the training thread, each other class on
/// its own thread with disjoint events. Same-priority events never overlap,
/// so per-level critical time is bounded by the window.
pub fn layered_trace(seed: u64) -> WorkerTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window: (TimeNs, TimeNs) = (0, 1_000);
    let mut trace = WorkerTrace::new(WorkerId(0), window);

    // Python: nested segments on thread 0.
    let mut cursor = 0;
    while cursor < window.1 - 10 && rng.gen_bool(0.8) {
        let start = cursor + rng.gen_range(0..30);
        let len = rng.gen_range(20..250).min(window.1 - start);
        if len < 5 {
            break;
        }
        let end = start + len;
        trace.push_event(
            FunctionId::python(format!("p{}", rng.gen_range(0..2)), vec!["outer.py:run".into()]),
            start,
            end,
            0,
            true,
        );
        if len > 40 && rng.gen_bool(0.7) {
            let c0 = start + rng.gen_range(5..len / 2);
            let c1 = c0 + rng.gen_range(5..(end - c0).max(6).min(len / 2));
            trace.push_event(
                FunctionId::python(
                    format!("pc{}", rng.gen_range(0..2)),
                    vec!["outer.py:run".into(), "inner.py:call".into()],
                ),
                c0,
                c1.min(end),
                0,
                true,
            );
        }
        cursor = end;
    }
    // One thread per remaining class, disjoint events.
    for (thread, kind) in [(1u32, 0), (2, 1), (3, 2)] {
        let mut cursor = rng.gen_range(0..50);
        while cursor < window.1 - 5 && rng.gen_bool(0.85) {
            let start = cursor + rng.gen_range(0..40);
            let len = rng.gen_range(5..200).min(window.1.saturating_sub(start));
            if len < 2 || start + len > window.1 {
                break;
            }
            let f = match kind {
                0 => FunctionId::gpu(GPU_NAMES[rng.gen_range(0..3)]),
                1 => FunctionId::memory(MEM_NAMES[rng.gen_range(0..2)]),
                _ => FunctionId::comm("ring", CommScope::InterWorker),
            };
            trace.push_event(f, start, start + len, thread, false);
            cursor = start + len + rng.gen_range(0..60);
        }
    }
    if trace.events.is_empty() {
        trace.push_event(FunctionId::gpu("k0"), 0, 100, 1, false);
    }
    trace.finalize().expect("generated trace is valid");
    trace
}

/// Random utilization array over {0, 0.25, 0.5, 1}, zero-heavy.
pub fn random_utilization(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let n = rng.gen_range(0..=max_len);
    (0..n)
        .map(|_| match rng.gen_range(0..6) {
            0..=2 => 0.0,
            3 => 0.25,
            4 => 0.5,
            _ => 1.0,
        })
        .collect()
}
