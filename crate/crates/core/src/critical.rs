//! Per-worker critical-path extraction.
//!
//! Function classes are prioritized (GPU compute kernels > memory ops >
//! collective communication > Python) and a function is on the critical path
//! at time t iff one of its events covers t and no event of a strictly
//! higher class does. Python events additionally must run on the training
//! thread and have no executing child call at t.
//!
//! The implementation sweeps the event boundary points: endpoints partition
//! the window into slices on which every "event X is active" predicate is
//! constant, so evaluating each slice once is exact.

use std::collections::BTreeMap;

use crate::trace::{FunctionId, FunctionKind, WorkerId, WorkerTrace};
use crate::TimeNs;

/// Critical-path priority; higher masks lower.
pub fn priority(kind: FunctionKind) -> u8 {
    match kind {
        FunctionKind::GpuComputeKernel => 3,
        FunctionKind::MemoryOp => 2,
        FunctionKind::CollectiveComm => 1,
        FunctionKind::PythonFunction => 0,
    }
}

/// Disjoint, sorted intervals during which each function of one worker is on
/// the critical path. Functions are addressed by their index in the source
/// trace's intern table.
#[derive(Debug, Clone)]
pub struct CriticalSegments {
    pub worker: WorkerId,
    per_function: Vec<Vec<(TimeNs, TimeNs)>>,
}

impl CriticalSegments {
    pub fn intervals(&self, func: u32) -> &[(TimeNs, TimeNs)] {
        self.per_function
            .get(func as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Total critical time of a function; 0 when absent.
    pub fn critical_time(&self, func: u32) -> TimeNs {
        self.intervals(func).iter().map(|(s, e)| e - s).sum()
    }

    /// Lookup by identity, for tests and debug output.
    pub fn critical_time_of(&self, trace: &WorkerTrace, f: &FunctionId) -> TimeNs {
        match trace.functions.iter().position(|g| g == f) {
            Some(i) => self.critical_time(i as u32),
            None => 0,
        }
    }

    pub fn function_count(&self) -> usize {
        self.per_function.len()
    }
}

pub fn compute_critical_segments(trace: &WorkerTrace) -> CriticalSegments {
    let (win_start, win_end) = trace.window;
    let nfuncs = trace.functions.len();
    if trace.events.is_empty() || win_end <= win_start {
        return CriticalSegments { worker: trace.worker, per_function: vec![Vec::new(); nfuncs] };
    }

    // Boundary points: every event endpoint clamped into the window.
    let mut bounds: Vec<TimeNs> = Vec::with_capacity(trace.events.len() * 2 + 2);
    bounds.push(win_start);
    bounds.push(win_end);
    for e in &trace.events {
        if e.start > win_start && e.start < win_end {
            bounds.push(e.start);
        }
        if e.end > win_start && e.end < win_end {
            bounds.push(e.end);
        }
    }
    bounds.sort_unstable();
    bounds.dedup();
    let nslices = bounds.len() - 1;
    let slice_of = |t: TimeNs| bounds.partition_point(|&b| b <= t) - 1;

    // Range a clamped event occupies, in slice indices [lo, hi).
    let slice_range = |start: TimeNs, end: TimeNs| -> Option<(usize, usize)> {
        let s = start.max(win_start);
        let e = end.min(win_end);
        if e <= s {
            return None;
        }
        Some((slice_of(s), slice_of(e - 1) + 1))
    };

    // Coverage count per priority level, via difference arrays over slices.
    let mut level_diff = vec![[0i32; 4]; nslices + 1];
    for e in &trace.events {
        if let Some((lo, hi)) = slice_range(e.start, e.end) {
            let level = priority(trace.function(e.func).kind) as usize;
            level_diff[lo][level] += 1;
            level_diff[hi][level] -= 1;
        }
    }
    // masked_above[s][level]: any strictly higher class active in slice s.
    let mut masked_above = vec![[false; 4]; nslices];
    let mut running = [0i32; 4];
    for s in 0..nslices {
        for l in 0..4 {
            running[l] += level_diff[s][l];
        }
        masked_above[s][3] = false;
        masked_above[s][2] = running[3] > 0;
        masked_above[s][1] = running[3] > 0 || running[2] > 0;
        masked_above[s][0] = running[3] > 0 || running[2] > 0 || running[1] > 0;
    }

    // Direct children per event (parent links are same-thread by construction).
    let mut children: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in trace.events.iter().enumerate() {
        if let Some(p) = e.parent {
            children.entry(p).or_default().push(i);
        }
    }

    // Per-function eligible coverage.
    let mut func_diff: Vec<Vec<i32>> = vec![Vec::new(); nfuncs];
    let mut add_interval = |func: u32, start: TimeNs, end: TimeNs| {
        if let Some((lo, hi)) = slice_range(start, end) {
            let d = &mut func_diff[func as usize];
            if d.is_empty() {
                d.resize(nslices + 1, 0);
            }
            d[lo] += 1;
            d[hi] -= 1;
        }
    };
    for (i, e) in trace.events.iter().enumerate() {
        let kind = trace.function(e.func).kind;
        if kind == FunctionKind::PythonFunction {
            if !e.is_training_thread {
                continue;
            }
            // Subtract the direct children: a Python frame with a live child
            // call is not itself doing work.
            let mut cursor = e.start;
            if let Some(kids) = children.get(&(i as u32)) {
                for &k in kids {
                    let c = &trace.events[k];
                    if c.start > cursor {
                        add_interval(e.func, cursor, c.start);
                    }
                    cursor = cursor.max(c.end);
                }
            }
            if cursor < e.end {
                add_interval(e.func, cursor, e.end);
            }
        } else {
            add_interval(e.func, e.start, e.end);
        }
    }

    // Merge critical slices per function.
    let mut per_function = vec![Vec::new(); nfuncs];
    for (fidx, diff) in func_diff.iter().enumerate() {
        if diff.is_empty() {
            continue;
        }
        let level = priority(trace.functions[fidx].kind) as usize;
        let mut cover = 0i32;
        let mut open: Option<TimeNs> = None;
        let out: &mut Vec<(TimeNs, TimeNs)> = &mut per_function[fidx];
        for s in 0..nslices {
            cover += diff[s];
            let critical = cover > 0 && !masked_above[s][level];
            match (critical, open) {
                (true, None) => open = Some(bounds[s]),
                (false, Some(start)) => {
                    out.push((start, bounds[s]));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(start) = open {
            out.push((start, win_end));
        }
    }

    CriticalSegments { worker: trace.worker, per_function }
}
