//! Trace data model shared by all modules: function identity, execution
//! events, hardware metric series, and the per-worker trace container.
//!
//! Timestamps are worker-local nanoseconds with the window start as epoch.
//! No operation anywhere in the toolkit combines two workers' timestamps in
//! one expression; cross-worker comparison happens only on the
//! timestamp-free patterns produced downstream.

mod io;

pub use io::{
    load_session, load_worker_trace, load_worker_trace_with_window, read_session_meta,
    trace_file_name, validate_session, write_session_meta, write_worker_trace, SessionMeta,
    SessionSummary,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{TimeNs, Value};

/// Global worker index (rank). Unique within one analysis session.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct WorkerId(pub u32);

impl WorkerId {
    pub fn rank(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for WorkerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "worker {}", self.0)
    }
}

/// Function class; the ordering here also drives critical-path priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FunctionKind {
    #[serde(rename = "gpu")]
    GpuComputeKernel,
    #[serde(rename = "mem")]
    MemoryOp,
    #[serde(rename = "comm")]
    CollectiveComm,
    #[serde(rename = "py")]
    PythonFunction,
}

/// Whether a collective runs inside one host (NVLink) or between hosts
/// (GPU-NIC path).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CommScope {
    #[serde(rename = "intra")]
    IntraWorker,
    #[serde(rename = "inter")]
    InterWorker,
}

/// Function identity. Two functions are the same iff kind, name, scope and
/// the full call stack are equal; for Python the entire stack is part of the
/// identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionId {
    pub kind: FunctionKind,
    pub name: String,
    /// Call-stack frames, outermost first. Empty unless kind is Python.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub call_stack: Vec<String>,
    /// Present iff kind is CollectiveComm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm_scope: Option<CommScope>,
}

impl FunctionId {
    pub fn gpu(name: impl Into<String>) -> Self {
        Self { kind: FunctionKind::GpuComputeKernel, name: name.into(), call_stack: Vec::new(), comm_scope: None }
    }

    pub fn memory(name: impl Into<String>) -> Self {
        Self { kind: FunctionKind::MemoryOp, name: name.into(), call_stack: Vec::new(), comm_scope: None }
    }

    pub fn comm(name: impl Into<String>, scope: CommScope) -> Self {
        Self { kind: FunctionKind::CollectiveComm, name: name.into(), call_stack: Vec::new(), comm_scope: Some(scope) }
    }

    pub fn python(name: impl Into<String>, call_stack: Vec<String>) -> Self {
        Self { kind: FunctionKind::PythonFunction, name: name.into(), call_stack, comm_scope: None }
    }

    /// Shape constraints that do not depend on any other record.
    pub fn check(&self) -> Result<(), String> {
        if self.kind != FunctionKind::PythonFunction && !self.call_stack.is_empty() {
            return Err(format!("call stack on non-Python function {:?}", self.name));
        }
        match (self.kind, self.comm_scope) {
            (FunctionKind::CollectiveComm, None) => {
                Err(format!("collective {:?} missing comm scope", self.name))
            }
            (k, Some(_)) if k != FunctionKind::CollectiveComm => {
                Err(format!("comm scope on non-collective {:?}", self.name))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for FunctionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name)
    }
}

/// Hardware metric channel; values are pre-normalized to [0, 1] of channel
/// capacity at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricChannel {
    #[serde(rename = "sm")]
    GpuSmFrequency,
    #[serde(rename = "cpu")]
    CpuUtilization,
    #[serde(rename = "nvlink")]
    NvlinkUtilization,
    #[serde(rename = "nic")]
    GpuNicBandwidth,
}

impl MetricChannel {
    pub const ALL: [MetricChannel; 4] = [
        MetricChannel::GpuSmFrequency,
        MetricChannel::CpuUtilization,
        MetricChannel::NvlinkUtilization,
        MetricChannel::GpuNicBandwidth,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MetricChannel::GpuSmFrequency => "gpu-sm-frequency",
            MetricChannel::CpuUtilization => "cpu-utilization",
            MetricChannel::NvlinkUtilization => "nvlink-utilization",
            MetricChannel::GpuNicBandwidth => "gpu-nic-bandwidth",
        }
    }
}

/// Timestamped samples of one channel on one worker. Stored as parallel
/// arrays so event slicing is a pair of binary searches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub channel: MetricChannel,
    pub timestamps: Vec<TimeNs>,
    pub values: Vec<Value>,
}

impl MetricSeries {
    pub fn new(channel: MetricChannel) -> Self {
        Self { channel, timestamps: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Index range of samples with timestamp in the closed interval [l, r].
    pub fn index_range(&self, l: TimeNs, r: TimeNs) -> std::ops::Range<usize> {
        let lo = self.timestamps.partition_point(|&t| t < l);
        let hi = self.timestamps.partition_point(|&t| t <= r);
        lo..hi
    }

    pub fn values_in(&self, l: TimeNs, r: TimeNs) -> &[Value] {
        &self.values[self.index_range(l, r)]
    }
}

/// One function-execution interval. The function is interned in the owning
/// [`WorkerTrace`]; `func` indexes into its table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub func: u32,
    pub start: TimeNs,
    pub end: TimeNs,
    pub thread_id: u32,
    /// Index of the enclosing event on the same thread, reconstructed from
    /// interval containment (or taken from the file when present).
    pub parent: Option<u32>,
    pub is_training_thread: bool,
}

impl TraceEvent {
    pub fn covers(&self, t: TimeNs) -> bool {
        self.start <= t && t < self.end
    }
}

/// Everything profiled on one worker during one window.
#[derive(Debug, Clone)]
pub struct WorkerTrace {
    pub worker: WorkerId,
    /// (start, end) of the profiling window in worker-local ns.
    pub window: (TimeNs, TimeNs),
    pub functions: Vec<FunctionId>,
    pub events: Vec<TraceEvent>,
    pub metrics: Vec<MetricSeries>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("invariant violation in {path}: {reason}")]
    InvariantViolation { path: String, reason: String },
    #[error("trace {path} contains no events")]
    EmptyTrace { path: String },
    #[error("duplicate worker rank {0}")]
    DuplicateWorker(u32),
    #[error("session contains no workers")]
    NoWorkers,
    #[error("missing or unreadable session.json in {0}")]
    MissingSessionMeta(String),
}

impl WorkerTrace {
    pub fn new(worker: WorkerId, window: (TimeNs, TimeNs)) -> Self {
        Self { worker, window, functions: Vec::new(), events: Vec::new(), metrics: Vec::new() }
    }

    pub fn window_len(&self) -> TimeNs {
        self.window.1 - self.window.0
    }

    pub fn function(&self, idx: u32) -> &FunctionId {
        &self.functions[idx as usize]
    }

    /// Intern a function id, returning its index.
    pub fn intern(&mut self, f: FunctionId) -> u32 {
        if let Some(i) = self.functions.iter().position(|g| *g == f) {
            return i as u32;
        }
        self.functions.push(f);
        (self.functions.len() - 1) as u32
    }

    pub fn series(&self, channel: MetricChannel) -> Option<&MetricSeries> {
        self.metrics.iter().find(|s| s.channel == channel)
    }

    pub fn push_event(
        &mut self,
        f: FunctionId,
        start: TimeNs,
        end: TimeNs,
        thread_id: u32,
        is_training_thread: bool,
    ) {
        let func = self.intern(f);
        self.events.push(TraceEvent { func, start, end, thread_id, parent: None, is_training_thread });
    }

    /// Sort events by start and derive parent links from per-thread interval
    /// containment. Ties on start are broken by the longer interval being the
    /// parent. Events that already carry a parent (explicit ids from the
    /// file, or a previous finalize) keep it, with indices remapped through
    /// the sort.
    pub fn finalize(&mut self) -> Result<(), String> {
        let n = self.events.len();
        let key = |e: &TraceEvent| (e.start, std::cmp::Reverse(e.end), e.thread_id, e.func);
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| key(&self.events[a as usize]).cmp(&key(&self.events[b as usize])));
        let mut rank = vec![0u32; n];
        for (new, &old) in order.iter().enumerate() {
            rank[old as usize] = new as u32;
        }
        let mut sorted: Vec<TraceEvent> =
            order.iter().map(|&i| self.events[i as usize]).collect();
        for e in &mut sorted {
            if let Some(p) = e.parent {
                e.parent = Some(rank[p as usize]);
            }
        }
        self.events = sorted;

        // Per-thread containment stacks fill in the missing parents.
        let mut stacks: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for i in 0..n {
            let (start, end, tid) =
                (self.events[i].start, self.events[i].end, self.events[i].thread_id);
            let stack = stacks.entry(tid).or_default();
            while let Some(&top) = stack.last() {
                if self.events[top as usize].end <= start {
                    stack.pop();
                } else {
                    break;
                }
            }
            if self.events[i].parent.is_none() {
                if let Some(&top) = stack.last() {
                    let p = &self.events[top as usize];
                    if start >= p.start && end <= p.end {
                        self.events[i].parent = Some(top);
                    }
                }
            }
            stack.push(i as u32);
        }

        self.check_invariants()
    }

    fn check_invariants(&self) -> Result<(), String> {
        for (i, e) in self.events.iter().enumerate() {
            if e.start >= e.end {
                return Err(format!("event {i}: start {} >= end {}", e.start, e.end));
            }
            if e.end <= self.window.0 || e.start >= self.window.1 {
                return Err(format!(
                    "event {i} [{}, {}] does not intersect window [{}, {}]",
                    e.start, e.end, self.window.0, self.window.1
                ));
            }
            if let Some(p) = e.parent {
                let parent = &self.events[p as usize];
                if parent.thread_id != e.thread_id
                    || e.start < parent.start
                    || e.end > parent.end
                {
                    return Err(format!("event {i}: not nested within its parent"));
                }
            }
        }
        for s in &self.metrics {
            if s.timestamps.len() != s.values.len() {
                return Err("metric series length mismatch".into());
            }
            for w in s.timestamps.windows(2) {
                if w[1] <= w[0] {
                    return Err(format!(
                        "{}: timestamps not strictly increasing",
                        s.channel.label()
                    ));
                }
            }
            for &v in &s.values {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{}: value {v} outside [0, 1]", s.channel.label()));
                }
            }
        }
        Ok(())
    }
}
