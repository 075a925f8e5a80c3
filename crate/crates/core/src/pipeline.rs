//! End-to-end orchestration: session summarization (parallel across
//! workers), pattern-directory localization, and the full
//! simulate/detect/coordinate/summarize/localize pipeline.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::ToolkitConfig;
use crate::coordinator::{plan_profiling, run_agreement_sim, AgreementSimConfig, ProfilingPlan};
use crate::critical::compute_critical_segments;
use crate::detector::{replay, DegradationDetector, DetectorConfig, DetectorError, Trigger};
use crate::localize::{localize, localize_with, AnomalyReport, LocalizeError, RangePolicy};
use crate::pattern::{
    patterns_file_name, read_patterns, summarize, write_patterns, WorkerPatterns,
};
use crate::simulator::{
    marker_stream, simulate, simulate_to_dir, GroundTruth, MarkerFault, MarkerStreamSpec,
    SimError, SimSpec,
};
use crate::trace::{load_worker_trace_with_window, TraceError, WorkerTrace};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

/// Byte accounting of one summarized worker.
#[derive(Debug, Clone, Copy)]
pub struct WorkerBytes {
    pub rank: u32,
    pub trace_bytes: u64,
    pub pattern_bytes: u64,
}

/// Summarize every worker trace of a session directory into pattern files.
/// Workers run in parallel; `workers` filters ranks when given.
pub fn summarize_session(
    session_dir: &Path,
    out_dir: &Path,
    cfg: &ToolkitConfig,
    workers: Option<&[u32]>,
) -> Result<Vec<WorkerBytes>, PipelineError> {
    summarize_session_with(session_dir, out_dir, cfg, workers, None)
}

/// [`summarize_session`] with an optional debug dump of the critical
/// segments (line-delimited intervals, one file per worker).
pub fn summarize_session_with(
    session_dir: &Path,
    out_dir: &Path,
    cfg: &ToolkitConfig,
    workers: Option<&[u32]>,
    segments_dump: Option<&Path>,
) -> Result<Vec<WorkerBytes>, PipelineError> {
    let meta = crate::trace::read_session_meta(session_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let mut paths: Vec<(u32, PathBuf)> = std::fs::read_dir(session_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let rank: u32 = name.strip_prefix("worker_")?.strip_suffix(".trace")?.parse().ok()?;
            Some((rank, p))
        })
        .filter(|(rank, _)| workers.is_none_or(|w| w.contains(rank)))
        .collect();
    paths.sort_by_key(|(rank, _)| *rank);
    if paths.is_empty() {
        return Err(TraceError::NoWorkers.into());
    }

    if let Some(dump) = segments_dump {
        std::fs::create_dir_all(dump)?;
    }
    let mut results = paths
        .par_iter()
        .map(|(rank, path)| {
            let trace = load_worker_trace_with_window(path, Some(meta.window()))?;
            let segments = compute_critical_segments(&trace);
            if let Some(dump) = segments_dump {
                dump_segments(&trace, &segments, &dump.join(format!("worker_{rank}.segments")))?;
            }
            let records = summarize(&trace, &segments, cfg);
            let out = out_dir.join(patterns_file_name(*rank));
            let pattern_bytes = write_patterns(&records, &out, cfg)?;
            let trace_bytes = std::fs::metadata(path)?.len();
            Ok(WorkerBytes { rank: *rank, trace_bytes, pattern_bytes })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    results.sort_by_key(|r| r.rank);
    Ok(results)
}

fn dump_segments(
    trace: &WorkerTrace,
    segments: &crate::critical::CriticalSegments,
    path: &Path,
) -> Result<(), PipelineError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (fidx, function) in trace.functions.iter().enumerate() {
        for &(start, end) in segments.intervals(fidx as u32) {
            writeln!(
                out,
                "{}",
                serde_json::json!({"f": function.name, "s": start, "e": end})
            )?;
        }
    }
    Ok(())
}

/// Summarize already-loaded traces in memory (parallel across workers).
pub fn summarize_traces(traces: &[WorkerTrace], cfg: &ToolkitConfig) -> Vec<WorkerPatterns> {
    traces
        .par_iter()
        .map(|trace| {
            let segments = compute_critical_segments(trace);
            WorkerPatterns { worker: trace.worker, records: summarize(trace, &segments, cfg) }
        })
        .collect()
}

/// Run localization over a directory of pattern files, single-threaded.
pub fn localize_dir(patterns_dir: &Path, cfg: &ToolkitConfig) -> Result<AnomalyReport, PipelineError> {
    localize_dir_with(patterns_dir, cfg, false)
}

/// Directory localization with opt-in per-function parallelism. Files stream
/// in rank order; only the per-function vectors stay resident.
pub fn localize_dir_with(
    patterns_dir: &Path,
    cfg: &ToolkitConfig,
    parallel: bool,
) -> Result<AnomalyReport, PipelineError> {
    let mut paths: Vec<(u32, PathBuf)> = std::fs::read_dir(patterns_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let rank: u32 =
                name.strip_prefix("worker_")?.strip_suffix(".patterns")?.parse().ok()?;
            Some((rank, p))
        })
        .collect();
    paths.sort_by_key(|(rank, _)| *rank);
    if paths.is_empty() {
        return Err(LocalizeError::EmptySession.into());
    }
    let policy = RangePolicy::from_config(cfg);
    let sources = paths
        .iter()
        .map(|(_, p)| read_patterns(p).map(|(_, wp)| wp))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(localize_with(sources, &policy, cfg, parallel)?)
}

/// Everything `e2e` produces.
#[derive(Debug)]
pub struct E2eOutcome {
    pub trigger: Option<Trigger>,
    pub plan: ProfilingPlan,
    pub daemons_agreed: bool,
    pub report: AnomalyReport,
    pub truth: GroundTruth,
}

/// Full pipeline on one simulated cluster: derive the marker stream the
/// fault would produce, run degradation detection, plan and verify
/// synchronized profiling, then simulate the window and localize.
/// Profiling proceeds even without a trigger (manual run), which keeps the
/// no-fault path exercised end to end.
pub fn run_e2e(
    spec: &SimSpec,
    cfg: &ToolkitConfig,
    keep_dir: Option<&Path>,
) -> Result<E2eOutcome, PipelineError> {
    spec.validate().map_err(PipelineError::Sim)?;

    // Iteration durations before and under the fault, from a cheap probe
    // window (schedule only needs a couple of iterations).
    let healthy_s = spec.cluster.iteration_template.healthy_iteration_s();
    let probe = SimSpec {
        window_seconds: healthy_s * 2.5,
        sample_rate_hz: 100,
        ..spec.clone()
    };
    let probe_out = simulate(&probe)?;
    let faulted_s = probe_out.truth.observed_iteration_s;

    // Degradation detection over the stream a worker would emit: a stable
    // run at the healthy pace, then the fault onset.
    let stream_spec = MarkerStreamSpec {
        iterations: 160,
        base_seconds: healthy_s,
        nexts: 1,
        steps: 1,
        faults: if faulted_s > healthy_s * 1.0001 {
            vec![MarkerFault::SlowFrom { iteration: 100, factor: faulted_s / healthy_s }]
        } else {
            Vec::new()
        },
    };
    let mut detector = DegradationDetector::new(DetectorConfig::from_config(cfg));
    let triggers = replay(&mut detector, marker_stream(&stream_spec))?;
    let trigger = triggers.first().copied();

    // Synchronized profiling: plan off rank-0's iteration and check the
    // polling agreement for this cluster size.
    let rank0_iteration = 160;
    let plan = plan_profiling(rank0_iteration, faulted_s.max(healthy_s), cfg)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let agreement = run_agreement_sim(
        &AgreementSimConfig {
            daemons: spec.cluster.workers.min(64) as usize,
            seed: spec.seed,
            trigger_at_iterations: rank0_iteration as f64 + 0.3,
            mean_iteration_seconds: faulted_s.max(healthy_s),
        },
        cfg,
    );
    let daemons_agreed = agreement.missed.is_empty()
        && agreement
            .profiled
            .iter()
            .all(|r| *r == Some((agreement.plan.start_iteration, agreement.plan.stop_iteration)));

    // The profiling window itself.
    let mut run_cfg = cfg.clone();
    run_cfg.window_seconds = spec.window_seconds;
    run_cfg.sample_rate_hz = spec.sample_rate_hz;
    let (patterns, truth) = match keep_dir {
        Some(dir) => {
            let session_dir = dir.join("session");
            let patterns_dir = dir.join("patterns");
            let (_, truth) = simulate_to_dir(spec, &session_dir, &run_cfg)?;
            summarize_session(&session_dir, &patterns_dir, &run_cfg, None)?;
            let mut sources = Vec::new();
            for rank in 0..spec.cluster.workers {
                let (_, wp) = read_patterns(&patterns_dir.join(patterns_file_name(rank)))?;
                sources.push(wp);
            }
            (sources, truth)
        }
        None => {
            let out = simulate(spec)?;
            (summarize_traces(&out.traces, &run_cfg), out.truth)
        }
    };
    let policy = RangePolicy::from_config(&run_cfg);
    let report = localize(patterns, &policy, &run_cfg)?;

    Ok(E2eOutcome { trigger, plan, daemons_agreed, report, truth })
}
