//! Behavior-pattern summarization: each (function, worker) pair collapses to
//! the triple (beta, mu, sigma) — critical-path time fraction, weighted mean
//! resource utilization, and weighted standard deviation of utilization —
//! plus an execution count and the channel the utilization was read from.
//!
//! The triple is independent of absolute timestamps, which is what makes
//! cross-worker comparison possible without clock synchronization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ToolkitConfig;
use crate::critical::CriticalSegments;
use crate::num::{self, round_sig, Scalar};
use crate::trace::{
    CommScope, FunctionId, FunctionKind, MetricChannel, TraceError, WorkerId, WorkerTrace,
};
use crate::{TimeNs, Value};

/// The (beta, mu, sigma) summary of one function on one worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPattern {
    pub beta: Value,
    pub mu: Value,
    pub sigma: Value,
    pub exec_count: u32,
    /// Channel mu/sigma were computed from; memory operations carry none and
    /// are summarized by beta only.
    pub channel: Option<MetricChannel>,
}

impl BehaviorPattern {
    pub fn as_vector(&self) -> [Value; 3] {
        [self.beta, self.mu, self.sigma]
    }
}

/// One serialized pattern record.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternRecord {
    pub worker: WorkerId,
    pub function: FunctionId,
    pub pattern: BehaviorPattern,
}

/// All records of one worker, the unit localization consumes.
#[derive(Debug, Clone)]
pub struct WorkerPatterns {
    pub worker: WorkerId,
    pub records: Vec<PatternRecord>,
}

/// Hardware channel that determines a function's performance.
///
/// Memory operations get no channel: they are summarized by beta only.
pub fn resource_channel(f: &FunctionId) -> Option<MetricChannel> {
    match f.kind {
        FunctionKind::GpuComputeKernel => Some(MetricChannel::GpuSmFrequency),
        FunctionKind::PythonFunction => Some(MetricChannel::CpuUtilization),
        FunctionKind::CollectiveComm => match f.comm_scope {
            Some(CommScope::IntraWorker) => Some(MetricChannel::NvlinkUtilization),
            _ => Some(MetricChannel::GpuNicBandwidth),
        },
        FunctionKind::MemoryOp => None,
    }
}

/// Parameters of the critical-duration search.
#[derive(Debug, Clone, Copy)]
pub struct CriticalDurationParams<S> {
    /// Fraction of the total utilization mass the subinterval must carry.
    pub mass_fraction: S,
    /// Values at or below this count as zeros for the gap search.
    pub zero_eps: S,
}

impl Default for CriticalDurationParams<Value> {
    fn default() -> Self {
        Self { mass_fraction: 0.8, zero_eps: 0.01 }
    }
}

impl CriticalDurationParams<Value> {
    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        Self { mass_fraction: cfg.mass_fraction, zero_eps: cfg.zero_eps }
    }
}

/// Index-space result of the critical-duration search, inclusive on both
/// ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticalSpan {
    pub start: usize,
    pub end: usize,
    pub g_max: usize,
}

/// The critical execution duration in timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticalDuration {
    pub l_c: TimeNs,
    pub r_c: TimeNs,
    pub g_max: usize,
}

/// Find the critical execution duration of a sample vector: the subinterval
/// carrying at least `mass_fraction` of the total utilization with the
/// smallest tolerated run of consecutive zeros.
///
/// The gap tolerance g is binary-searched (feasibility is monotone in g);
/// among subintervals qualifying at the minimal g the shortest wins, ties
/// resolved to the earliest. Returns `None` when the input is empty or
/// carries no mass; callers fall back to the whole execution interval.
pub fn critical_span<S: Scalar>(values: &[S], params: CriticalDurationParams<S>) -> Option<CriticalSpan> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mut total = S::zero();
    for &v in values {
        total += v;
    }
    if total <= S::zero() {
        return None;
    }
    let threshold = params.mass_fraction * total;

    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(S::zero());
    let mut acc = S::zero();
    for &v in values {
        acc += v;
        prefix.push(acc);
    }
    // zrun[m]: length of the zero run ending at m.
    let mut zrun = vec![0usize; n];
    for m in 0..n {
        if values[m] <= params.zero_eps {
            zrun[m] = if m == 0 { 1 } else { zrun[m - 1] + 1 };
        }
    }

    // Best qualifying subinterval at gap tolerance g, or None.
    let best_at = |g: usize| -> Option<(usize, usize)> {
        // bad[m] = 1 when a zero run of length > g ends at m; a window [i, j]
        // violates the tolerance iff some bad position lies in [i+g, j].
        let mut bad_prefix = vec![0u32; n + 1];
        for m in 0..n {
            bad_prefix[m + 1] = bad_prefix[m] + u32::from(zrun[m] > g);
        }
        let mut best: Option<(usize, usize)> = None;
        let mut j = 0usize;
        for i in 0..n {
            if j < i {
                j = i;
            }
            while j < n && prefix[j + 1] - prefix[i] < threshold {
                j += 1;
            }
            if j == n {
                break; // no window starting at i (or later) reaches the mass
            }
            let lo = i + g;
            let violated = lo <= j && bad_prefix[j + 1] > bad_prefix[lo];
            if !violated {
                let len = j - i + 1;
                match best {
                    Some((bi, bj)) if bj - bi < len => {}
                    _ => best = Some((i, j)),
                }
            }
        }
        best
    };

    let mut lo = 0i64;
    let mut hi = n as i64;
    let mut result: Option<CriticalSpan> = None;
    while lo <= hi {
        let g = ((lo + hi) / 2) as usize;
        if let Some((i, j)) = best_at(g) {
            result = Some(CriticalSpan { start: i, end: j, g_max: g });
            hi = g as i64 - 1;
        } else {
            lo = g as i64 + 1;
        }
    }
    result
}

/// Timestamp of sample `i` of `n` uniformly spaced samples over [l, r].
pub fn sample_timestamp(l: TimeNs, r: TimeNs, n: usize, i: usize) -> TimeNs {
    if n <= 1 {
        return (l + r) / 2;
    }
    l + ((r - l) * i as i64) / (n as i64 - 1)
}

/// Critical duration of an execution [l, r] sampled uniformly by `samples`.
pub fn critical_duration(
    samples: &[Value],
    l: TimeNs,
    r: TimeNs,
    params: CriticalDurationParams<Value>,
) -> CriticalDuration {
    match critical_span(samples, params) {
        Some(span) => CriticalDuration {
            l_c: sample_timestamp(l, r, samples.len(), span.start),
            r_c: sample_timestamp(l, r, samples.len(), span.end),
            g_max: span.g_max,
        },
        None => CriticalDuration { l_c: l, r_c: r, g_max: 0 },
    }
}

const PATTERN_SIG_DIGITS: u32 = 9;

/// Summarize one worker's trace into pattern records.
///
/// beta comes from the critical segments; mu and sigma aggregate the
/// critical durations of every execution, weighted by the number of samples
/// each critical duration contains. Python events off the training thread
/// are omitted entirely.
pub fn summarize(
    trace: &WorkerTrace,
    segments: &CriticalSegments,
    cfg: &ToolkitConfig,
) -> Vec<PatternRecord> {
    let params = CriticalDurationParams::from_config(cfg);
    let window_len = trace.window_len().max(1) as Value;
    let mut records = Vec::new();

    for (fidx, function) in trace.functions.iter().enumerate() {
        let fidx = fidx as u32;
        let is_python = function.kind == FunctionKind::PythonFunction;
        let events: Vec<_> = trace
            .events
            .iter()
            .filter(|e| e.func == fidx && (!is_python || e.is_training_thread))
            .collect();
        if events.is_empty() {
            continue;
        }

        let beta = segments.critical_time(fidx) as Value / window_len;
        let channel = resource_channel(function);
        let (mut weighted_mean, mut weighted_std, mut total_weight) = (0.0, 0.0, 0.0);
        if let Some(series) = channel.and_then(|ch| trace.series(ch)) {
            for e in &events {
                let vals = series.values_in(e.start, e.end);
                if vals.is_empty() {
                    continue;
                }
                let (lo, hi) = match critical_span(vals, params) {
                    Some(span) => (span.start, span.end),
                    None => (0, vals.len() - 1),
                };
                let window = &vals[lo..=hi];
                let weight = window.len() as Value;
                weighted_mean += weight * num::mean(window);
                weighted_std += weight * num::population_std(window);
                total_weight += weight;
            }
        }
        let (mu, sigma) = if total_weight > 0.0 {
            (weighted_mean / total_weight, weighted_std / total_weight)
        } else {
            (0.0, 0.0)
        };

        records.push(PatternRecord {
            worker: trace.worker,
            function: function.clone(),
            pattern: BehaviorPattern {
                beta: round_sig(beta, PATTERN_SIG_DIGITS),
                mu: round_sig(mu, PATTERN_SIG_DIGITS),
                sigma: round_sig(sigma, PATTERN_SIG_DIGITS),
                exec_count: events.len() as u32,
                channel,
            },
        });
    }
    records
}

// --- pattern file format ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireFunction {
    k: FunctionKind,
    n: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    cs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scope: Option<CommScope>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireRecord {
    f: WireFunction,
    b: Value,
    m: Value,
    s: Value,
    n: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ch: Option<MetricChannel>,
}

/// First line of a pattern file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternFileHeader {
    pub t: String,
    pub w: u32,
    pub records: usize,
    pub version: String,
    pub config: ToolkitConfig,
}

pub fn patterns_file_name(rank: u32) -> String {
    format!("worker_{rank}.patterns")
}

/// Write one worker's records as header plus line-delimited entries; returns
/// bytes written.
pub fn write_patterns(
    records: &[PatternRecord],
    path: &Path,
    cfg: &ToolkitConfig,
) -> Result<u64, TraceError> {
    let worker = records.first().map(|r| r.worker.rank()).unwrap_or(0);
    let header = PatternFileHeader {
        t: "hdr".into(),
        w: worker,
        records: records.len(),
        version: crate::TOOLKIT_VERSION.into(),
        config: cfg.clone(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    let mut bytes = 0u64;
    let mut line = serde_json::to_string(&header).expect("serializable header");
    line.push('\n');
    out.write_all(line.as_bytes())?;
    bytes += line.len() as u64;
    for r in records {
        let wire = WireRecord {
            f: WireFunction {
                k: r.function.kind,
                n: r.function.name.clone(),
                cs: r.function.call_stack.clone(),
                scope: r.function.comm_scope,
            },
            b: r.pattern.beta,
            m: r.pattern.mu,
            s: r.pattern.sigma,
            n: r.pattern.exec_count,
            ch: r.pattern.channel,
        };
        line = serde_json::to_string(&wire).expect("serializable record");
        line.push('\n');
        out.write_all(line.as_bytes())?;
        bytes += line.len() as u64;
    }
    out.flush()?;
    Ok(bytes)
}

pub fn read_patterns(path: &Path) -> Result<(PatternFileHeader, WorkerPatterns), TraceError> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| TraceError::MalformedRecord {
        path: display.clone(),
        line: 1,
        reason: "missing header".into(),
    })?;
    let header: PatternFileHeader =
        serde_json::from_str(&first?).map_err(|e| TraceError::MalformedRecord {
            path: display.clone(),
            line: 1,
            reason: e.to_string(),
        })?;
    let worker = WorkerId(header.w);
    let mut records = Vec::with_capacity(header.records);
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord =
            serde_json::from_str(&line).map_err(|e| TraceError::MalformedRecord {
                path: display.clone(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        let function = FunctionId {
            kind: wire.f.k,
            name: wire.f.n,
            call_stack: wire.f.cs,
            comm_scope: wire.f.scope,
        };
        records.push(PatternRecord {
            worker,
            function,
            pattern: BehaviorPattern {
                beta: wire.b,
                mu: wire.m,
                sigma: wire.s,
                exec_count: wire.n,
                channel: wire.ch,
            },
        });
    }
    Ok((header, WorkerPatterns { worker, records }))
}
