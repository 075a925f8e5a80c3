//! Line-delimited trace file format and session directory handling.
//!
//! One file per worker, named `worker_<rank>.trace`, holding two record
//! shapes:
//!
//! ```text
//! {"t":"ev","k":"gpu","n":"gemm_fwd","s":0,"e":1000,"tid":1,"tt":false}
//! {"t":"hw","ch":"nic","ts":500,"v":0.97}
//! ```
//!
//! A session is a directory of such files plus `session.json` carrying the
//! window bounds, sample rate, and an echo of the effective configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ToolkitConfig;
use crate::{TimeNs, Value};

use super::{
    CommScope, FunctionId, FunctionKind, MetricChannel, MetricSeries, TraceError, WorkerId,
    WorkerTrace,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "t")]
enum RawRecord {
    #[serde(rename = "ev")]
    Event {
        k: FunctionKind,
        n: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        cs: Vec<String>,
        s: TimeNs,
        e: TimeNs,
        tid: u32,
        tt: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scope: Option<CommScope>,
        /// Explicit parent index; optional, normally reconstructed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<u32>,
    },
    #[serde(rename = "hw")]
    Sample { ch: MetricChannel, ts: TimeNs, v: Value },
}

/// Contents of `session.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionMeta {
    pub window_start_ns: TimeNs,
    pub window_end_ns: TimeNs,
    pub sample_rate_hz: u32,
    pub workers: u32,
    pub config: ToolkitConfig,
}

impl SessionMeta {
    pub fn window(&self) -> (TimeNs, TimeNs) {
        (self.window_start_ns, self.window_end_ns)
    }
}

pub fn trace_file_name(rank: u32) -> String {
    format!("worker_{rank}.trace")
}

fn rank_from_file_name(path: &Path) -> Option<u32> {
    let name = path.file_name()?.to_str()?;
    let rest = name.strip_prefix("worker_")?.strip_suffix(".trace")?;
    rest.parse().ok()
}

pub fn write_session_meta(dir: &Path, meta: &SessionMeta) -> Result<(), TraceError> {
    let mut out = BufWriter::new(File::create(dir.join("session.json"))?);
    serde_json::to_writer_pretty(&mut out, meta).map_err(|e| TraceError::InvariantViolation {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_session_meta(dir: &Path) -> Result<SessionMeta, TraceError> {
    let path = dir.join("session.json");
    let file =
        File::open(&path).map_err(|_| TraceError::MissingSessionMeta(dir.display().to_string()))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|_| TraceError::MissingSessionMeta(dir.display().to_string()))
}

/// Write one worker's trace file; returns bytes written.
pub fn write_worker_trace(trace: &WorkerTrace, dir: &Path) -> Result<u64, TraceError> {
    let path = dir.join(trace_file_name(trace.worker.rank()));
    let mut out = BufWriter::new(File::create(&path)?);
    let mut bytes = 0u64;
    let mut line = String::with_capacity(256);
    for e in &trace.events {
        let f = trace.function(e.func);
        let rec = RawRecord::Event {
            k: f.kind,
            n: f.name.clone(),
            cs: f.call_stack.clone(),
            s: e.start,
            e: e.end,
            tid: e.thread_id,
            tt: e.is_training_thread,
            scope: f.comm_scope,
            p: None,
        };
        line.clear();
        line.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        line.push('\n');
        out.write_all(line.as_bytes())?;
        bytes += line.len() as u64;
    }
    for series in &trace.metrics {
        for (&ts, &v) in series.timestamps.iter().zip(&series.values) {
            let rec = RawRecord::Sample { ch: series.channel, ts, v };
            line.clear();
            line.push_str(&serde_json::to_string(&rec).expect("serializable record"));
            line.push('\n');
            out.write_all(line.as_bytes())?;
            bytes += line.len() as u64;
        }
    }
    out.flush()?;
    Ok(bytes)
}

/// Load one worker trace, taking the window from a sibling `session.json`
/// when present and falling back to the data extent otherwise.
pub fn load_worker_trace(path: &Path) -> Result<WorkerTrace, TraceError> {
    let window = path
        .parent()
        .and_then(|dir| read_session_meta(dir).ok())
        .map(|m| m.window());
    load_worker_trace_with_window(path, window)
}

pub fn load_worker_trace_with_window(
    path: &Path,
    window: Option<(TimeNs, TimeNs)>,
) -> Result<WorkerTrace, TraceError> {
    let display = path.display().to_string();
    let rank = rank_from_file_name(path).ok_or_else(|| TraceError::InvariantViolation {
        path: display.clone(),
        reason: "file name is not worker_<rank>.trace".into(),
    })?;
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut trace = WorkerTrace::new(WorkerId(rank), (0, 0));
    let mut series: BTreeMap<MetricChannel, MetricSeries> = BTreeMap::new();
    let mut explicit_parents: Vec<(usize, u32)> = Vec::new();
    let mut min_ts = TimeNs::MAX;
    let mut max_ts = TimeNs::MIN;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| TraceError::MalformedRecord {
                path: display.clone(),
                line: lineno,
                reason: e.to_string(),
            })?;
        match rec {
            RawRecord::Event { k, n, cs, s, e, tid, tt, scope, p } => {
                if e <= s {
                    return Err(TraceError::MalformedRecord {
                        path: display.clone(),
                        line: lineno,
                        reason: format!("event end {e} <= start {s}"),
                    });
                }
                let fid = FunctionId { kind: k, name: n, call_stack: cs, comm_scope: scope };
                fid.check().map_err(|reason| TraceError::MalformedRecord {
                    path: display.clone(),
                    line: lineno,
                    reason,
                })?;
                min_ts = min_ts.min(s);
                max_ts = max_ts.max(e);
                trace.push_event(fid, s, e, tid, tt);
                if let Some(p) = p {
                    explicit_parents.push((trace.events.len() - 1, p));
                }
            }
            RawRecord::Sample { ch, ts, v } => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(TraceError::MalformedRecord {
                        path: display.clone(),
                        line: lineno,
                        reason: format!("sample value {v} outside [0, 1]"),
                    });
                }
                min_ts = min_ts.min(ts);
                max_ts = max_ts.max(ts);
                let s = series.entry(ch).or_insert_with(|| MetricSeries::new(ch));
                s.timestamps.push(ts);
                s.values.push(v);
            }
        }
    }

    if trace.events.is_empty() {
        return Err(TraceError::EmptyTrace { path: display });
    }
    for (i, p) in explicit_parents {
        trace.events[i].parent = Some(p);
    }
    trace.window = window.unwrap_or((min_ts, max_ts));
    trace.metrics = series.into_values().collect();
    trace
        .finalize()
        .map_err(|reason| TraceError::InvariantViolation { path: display, reason })?;
    Ok(trace)
}

/// Load a full session directory: `session.json` plus every worker file,
/// sorted by rank.
pub fn load_session(dir: &Path) -> Result<(SessionMeta, Vec<WorkerTrace>), TraceError> {
    let meta = read_session_meta(dir)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| rank_from_file_name(p).is_some())
        .collect();
    paths.sort_by_key(|p| rank_from_file_name(p).unwrap());
    if paths.is_empty() {
        return Err(TraceError::NoWorkers);
    }
    let traces = paths
        .iter()
        .map(|p| load_worker_trace_with_window(p, Some(meta.window())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((meta, traces))
}

/// Cross-worker summary produced by [`validate_session`].
#[derive(Debug, Clone)]
pub struct SessionSummary {
    pub workers: usize,
    pub function_universe: BTreeSet<FunctionId>,
    /// Number of workers carrying each channel.
    pub channel_coverage: BTreeMap<&'static str, usize>,
}

pub fn validate_session(traces: &[WorkerTrace]) -> Result<SessionSummary, TraceError> {
    if traces.is_empty() {
        return Err(TraceError::NoWorkers);
    }
    let mut seen = BTreeSet::new();
    for t in traces {
        if !seen.insert(t.worker) {
            return Err(TraceError::DuplicateWorker(t.worker.rank()));
        }
    }
    let mut universe = BTreeSet::new();
    let mut coverage: BTreeMap<&'static str, usize> = BTreeMap::new();
    for t in traces {
        for f in &t.functions {
            universe.insert(f.clone());
        }
        for s in &t.metrics {
            *coverage.entry(s.channel.label()).or_default() += 1;
        }
    }
    Ok(SessionSummary { workers: traces.len(), function_universe: universe, channel_coverage: coverage })
}
