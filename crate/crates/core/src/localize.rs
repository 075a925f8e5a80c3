//! Abnormality localization over aggregated pattern records.
//!
//! Two distances are computed per (function, worker): the minimal Manhattan
//! distance from the pattern to a per-class expected-range box, and the
//! differential distance — the fraction of sampled peers whose
//! max-normalized pattern differs by at least delta. A pair is abnormal iff
//! its beta exceeds the gate and either distance fires; the differential
//! threshold is median + k * MAD over all workers' differential distances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ToolkitConfig;
use crate::num::{interval_distance, manhattan3, median, median_abs_deviation, Scalar};
use crate::pattern::{BehaviorPattern, WorkerPatterns};
use crate::trace::{FunctionId, FunctionKind, WorkerId};
use crate::Value;

/// Closed per-component box of expected (beta, mu, sigma) values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRange {
    pub beta: (Value, Value),
    pub mu: (Value, Value),
    pub sigma: (Value, Value),
}

impl ExpectedRange {
    pub const FULL: ExpectedRange =
        ExpectedRange { beta: (0.0, 1.0), mu: (0.0, 1.0), sigma: (0.0, 1.0) };

    pub fn with_beta(lo: Value, hi: Value) -> Self {
        ExpectedRange { beta: (lo, hi), ..Self::FULL }
    }

    pub fn contains(&self, p: &BehaviorPattern) -> bool {
        let inside = |x: Value, (lo, hi): (Value, Value)| lo <= x && x <= hi;
        inside(p.beta, self.beta) && inside(p.mu, self.mu) && inside(p.sigma, self.sigma)
    }
}

/// Expected ranges per function class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangePolicy {
    pub python: ExpectedRange,
    pub collective: ExpectedRange,
    pub gpu: ExpectedRange,
    pub memory: ExpectedRange,
}

impl Default for RangePolicy {
    fn default() -> Self {
        // A healthy job should not be bottlenecked by Python (>1% of the
        // window) and should spend bounded time in collectives; GPU kernels
        // and memory ops are unconstrained.
        Self {
            python: ExpectedRange::with_beta(0.0, 0.01),
            collective: ExpectedRange::with_beta(0.0, 0.3),
            gpu: ExpectedRange::FULL,
            memory: ExpectedRange::FULL,
        }
    }
}

impl RangePolicy {
    pub fn range_for(&self, kind: FunctionKind) -> &ExpectedRange {
        match kind {
            FunctionKind::PythonFunction => &self.python,
            FunctionKind::CollectiveComm => &self.collective,
            FunctionKind::GpuComputeKernel => &self.gpu,
            FunctionKind::MemoryOp => &self.memory,
        }
    }

    /// Apply config-file overrides keyed by the wire names of the classes.
    pub fn with_overrides(mut self, overrides: &BTreeMap<String, [[Value; 2]; 3]>) -> Self {
        for (key, r) in overrides {
            let range = ExpectedRange {
                beta: (r[0][0], r[0][1]),
                mu: (r[1][0], r[1][1]),
                sigma: (r[2][0], r[2][1]),
            };
            match key.as_str() {
                "py" => self.python = range,
                "comm" => self.collective = range,
                "gpu" => self.gpu = range,
                "mem" => self.memory = range,
                _ => {}
            }
        }
        self
    }

    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        Self::default().with_overrides(&cfg.range_overrides)
    }
}

/// Minimal Manhattan distance from a pattern to an expected-range box.
///
/// Per-axis projection: the sum of per-component interval distances equals
/// the minimum over all points of the box of the L1 distance.
pub fn distance_from_expectation(p: &BehaviorPattern, r: &ExpectedRange) -> Value {
    interval_distance(p.beta, r.beta.0, r.beta.1)
        + interval_distance(p.mu, r.mu.0, r.mu.1)
        + interval_distance(p.sigma, r.sigma.0, r.sigma.1)
}

/// Divide every component by its maximum over the workers; a component whose
/// maximum is zero normalizes to zero.
pub fn max_normalize<S: Scalar>(rows: &[[S; 3]]) -> Vec<[S; 3]> {
    let mut maxes = [S::zero(); 3];
    for row in rows {
        for c in 0..3 {
            if row[c] > maxes[c] {
                maxes[c] = row[c];
            }
        }
    }
    rows.iter()
        .map(|row| {
            let mut out = [S::zero(); 3];
            for c in 0..3 {
                if maxes[c] > S::zero() {
                    out[c] = row[c] / maxes[c];
                }
            }
            out
        })
        .collect()
}

fn mix_seed(seed: u64, function_index: u64, worker_index: u64) -> u64 {
    // splitmix64-style finalizer over the three inputs
    let mut z = seed
        .wrapping_add(function_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(worker_index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Differential distance of one worker: the fraction of `n_sample` peers
/// (drawn without replacement from all workers, self included) whose
/// normalized pattern lies at Manhattan distance >= delta.
pub fn differential_distance<S: Scalar>(
    normalized: &[[S; 3]],
    worker_index: usize,
    n_sample: usize,
    delta: S,
    seed: u64,
    function_index: usize,
) -> S {
    let n_workers = normalized.len();
    let n = n_sample.min(n_workers).max(1);
    let me = &normalized[worker_index];
    let mut far = 0usize;
    if n == n_workers {
        for peer in normalized {
            if manhattan3(me, peer) >= delta {
                far += 1;
            }
        }
    } else {
        // Uniform sample of n distinct peers: draw, dedup, top up. At the
        // operating ratios (100 of >100 workers is only sampled when the
        // pool is large) collisions are rare, so this stays O(n log n).
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(seed, function_index as u64, worker_index as u64));
        let mut picks: Vec<u32> =
            (0..n).map(|_| rng.gen_range(0..n_workers as u32)).collect();
        picks.sort_unstable();
        picks.dedup();
        while picks.len() < n {
            let candidate = rng.gen_range(0..n_workers as u32);
            if let Err(slot) = picks.binary_search(&candidate) {
                picks.insert(slot, candidate);
            }
        }
        for peer in picks {
            if manhattan3(me, &normalized[peer as usize]) >= delta {
                far += 1;
            }
        }
    }
    S::from_usize(far).unwrap() / S::from_usize(n).unwrap()
}

/// Peer-outlier threshold: median + k * MAD of the differential distances.
pub fn mad_threshold<S: Scalar>(deltas: &[S], k: S) -> S {
    let (m, mad) = median_abs_deviation(deltas);
    m + k * mad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyReason {
    OutOfExpectedRange,
    PeerOutlier,
    Both,
}

impl std::fmt::Display for AnomalyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AnomalyReason::OutOfExpectedRange => "out-of-expected-range",
            AnomalyReason::PeerOutlier => "peer-outlier",
            AnomalyReason::Both => "out-of-expected-range+peer-outlier",
        };
        f.write_str(s)
    }
}

/// One evaluated (function, worker) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub worker: u32,
    pub function: FunctionId,
    pub pattern: BehaviorPattern,
    pub normalized: [Value; 3],
    pub d: Value,
    pub delta: Value,
    pub threshold: Value,
    pub abnormal: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<AnomalyReason>,
    pub description: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComponentStats {
    pub min: Value,
    pub median: Value,
    pub max: Value,
}

fn component_stats(xs: &[Value]) -> ComponentStats {
    ComponentStats {
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        median: median(xs),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Cross-worker distribution of one function, for report rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionSummary {
    pub function: FunctionId,
    pub workers_with_records: usize,
    pub beta: ComponentStats,
    pub mu: ComponentStats,
    pub sigma: ComponentStats,
    pub flagged_workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub version: String,
    pub config: ToolkitConfig,
    pub workers: usize,
    pub functions_evaluated: usize,
    /// The ordering of findings (abnormal first, then by D + delta) is a
    /// rendering choice of this toolkit, not part of the criterion.
    pub ranking_note: String,
    pub findings: Vec<AnomalyVerdict>,
    pub summaries: Vec<FunctionSummary>,
}

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("session contains no pattern records")]
    EmptySession,
    #[error("duplicate worker rank {0} in pattern inputs")]
    DuplicateWorker(u32),
}

/// One-line behavior description, phrased off the pattern's relation to the
/// per-function medians.
fn describe(
    function: &FunctionId,
    p: &BehaviorPattern,
    med: (Value, Value, Value),
    reason: Option<AnomalyReason>,
) -> String {
    let (beta_med, mu_med, sigma_med) = med;
    let channel = p.channel.map(|c| c.label()).unwrap_or("n/a");
    let low_mu = mu_med > 0.0 && p.mu < 0.75 * mu_med;
    let high_mu = mu_med > 0.0 && p.mu > 1.25 * mu_med;
    let low_sigma = p.sigma <= 0.5 * sigma_med;
    let high_beta = p.beta > 1.2 * beta_med;
    match function.kind {
        FunctionKind::CollectiveComm if low_mu && low_sigma => format!(
            "low mu with low sigma on {channel}: candidate slow link feeding this worker"
        ),
        FunctionKind::CollectiveComm if low_mu => format!(
            "low mu with high fluctuation on {channel}: waiting on a slower peer in the group"
        ),
        FunctionKind::CollectiveComm if high_mu => format!(
            "elevated mu on {channel}: traffic taking a fallback path (degraded interconnect?)"
        ),
        FunctionKind::GpuComputeKernel if high_beta && low_mu => {
            "high beta with low mu on gpu-sm-frequency: candidate gpu throttling".into()
        }
        FunctionKind::PythonFunction
            if matches!(reason, Some(AnomalyReason::OutOfExpectedRange | AnomalyReason::Both)) =>
        {
            "python function on the critical path beyond expectation: cpu-side bottleneck \
             (gc, data loading, or slow storage)"
                .into()
        }
        FunctionKind::MemoryOp => {
            "memory operation on the critical path: host-device transfer stall".into()
        }
        _ => "pattern deviates from peers".into(),
    }
}

struct FunctionRows {
    /// (worker index, pattern), in worker order.
    rows: Vec<(u32, BehaviorPattern)>,
}

/// Bounded best-scoring set; keeps memory flat at million-worker scale.
struct TopVerdicts {
    cap: usize,
    items: Vec<AnomalyVerdict>,
}

impl TopVerdicts {
    fn new(cap: usize) -> Self {
        Self { cap, items: Vec::new() }
    }

    fn push(&mut self, v: AnomalyVerdict) {
        if self.cap == 0 {
            return;
        }
        self.items.push(v);
        if self.items.len() >= self.cap * 2 {
            self.compact();
        }
    }

    fn compact(&mut self) {
        // Ties break on (worker, function) so the kept set does not depend
        // on source order.
        self.items.sort_by(|a, b| {
            (b.d + b.delta)
                .partial_cmp(&(a.d + a.delta))
                .unwrap()
                .then(a.worker.cmp(&b.worker))
                .then(a.function.cmp(&b.function))
        });
        self.items.truncate(self.cap);
    }

    fn into_vec(mut self) -> Vec<AnomalyVerdict> {
        self.compact();
        self.items
    }
}

/// Run the localization over per-worker pattern sets, single-threaded.
pub fn localize(
    sources: impl IntoIterator<Item = WorkerPatterns>,
    policy: &RangePolicy,
    cfg: &ToolkitConfig,
) -> Result<AnomalyReport, LocalizeError> {
    localize_with(sources, policy, cfg, false)
}

/// Run the localization over per-worker pattern sets.
///
/// Workers missing a record for a function participate with the zero pattern
/// in normalization and in the differential distance, but receive no verdict
/// for it. Per-function work is independent; `parallel` opts into running
/// functions on the rayon pool (output is identical either way).
pub fn localize_with(
    sources: impl IntoIterator<Item = WorkerPatterns>,
    policy: &RangePolicy,
    cfg: &ToolkitConfig,
    parallel: bool,
) -> Result<AnomalyReport, LocalizeError> {
    let mut workers: Vec<WorkerId> = Vec::new();
    let mut seen_ranks = std::collections::BTreeSet::new();
    let mut functions: BTreeMap<FunctionId, FunctionRows> = BTreeMap::new();

    for wp in sources {
        let widx = workers.len() as u32;
        if !seen_ranks.insert(wp.worker.rank()) {
            return Err(LocalizeError::DuplicateWorker(wp.worker.rank()));
        }
        workers.push(wp.worker);
        for rec in wp.records {
            functions
                .entry(rec.function)
                .or_insert_with(|| FunctionRows { rows: Vec::new() })
                .rows
                .push((widx, rec.pattern));
        }
    }
    if workers.is_empty() || functions.is_empty() {
        return Err(LocalizeError::EmptySession);
    }

    let n_workers = workers.len();
    let n_sample = cfg.peer_sample_cap.min(n_workers);

    let analyze = |fidx: usize,
                   function: &FunctionId,
                   data: &FunctionRows|
     -> (Vec<AnomalyVerdict>, FunctionSummary) {
        // Dense raw matrix with zero rows for absent workers.
        let mut raw = vec![[0.0 as Value; 3]; n_workers];
        for (widx, p) in &data.rows {
            raw[*widx as usize] = p.as_vector();
        }
        let normalized = max_normalize(&raw);
        let deltas: Vec<Value> = (0..n_workers)
            .map(|w| differential_distance(&normalized, w, n_sample, cfg.delta, cfg.rng_seed, fidx))
            .collect();
        let mut threshold = mad_threshold(&deltas, cfg.k);
        if let Some(floor) = cfg.mad_floor {
            if threshold == 0.0 {
                threshold = floor;
            }
        }

        let betas: Vec<Value> = data.rows.iter().map(|(_, p)| p.beta).collect();
        let mus: Vec<Value> = data.rows.iter().map(|(_, p)| p.mu).collect();
        let sigmas: Vec<Value> = data.rows.iter().map(|(_, p)| p.sigma).collect();
        let med = (median(&betas), median(&mus), median(&sigmas));
        let range = policy.range_for(function.kind);

        let mut verdicts = Vec::new();
        let mut near = TopVerdicts::new(cfg.report_near_misses);
        let mut flagged = 0usize;
        for (widx, p) in &data.rows {
            if p.beta <= cfg.beta_gate {
                continue;
            }
            let w = *widx as usize;
            let d = distance_from_expectation(p, range);
            let delta = deltas[w];
            let out_of_range = d > 0.0;
            let peer_outlier = delta > threshold;
            let abnormal = out_of_range || peer_outlier;
            let reason = match (out_of_range, peer_outlier) {
                (true, true) => Some(AnomalyReason::Both),
                (true, false) => Some(AnomalyReason::OutOfExpectedRange),
                (false, true) => Some(AnomalyReason::PeerOutlier),
                (false, false) => None,
            };
            let verdict = AnomalyVerdict {
                worker: workers[w].rank(),
                function: function.clone(),
                pattern: *p,
                normalized: normalized[w],
                d,
                delta,
                threshold,
                abnormal,
                reason,
                description: describe(function, p, med, reason),
            };
            if abnormal {
                flagged += 1;
                verdicts.push(verdict);
            } else {
                near.push(verdict);
            }
        }
        verdicts.extend(near.into_vec());

        let beta_stats = component_stats(&betas);
        let mu_stats = component_stats(&mus);
        let note = if function.kind == FunctionKind::GpuComputeKernel
            && data.rows.len() >= 4
            && mu_stats.max - mu_stats.min < 0.1
            && beta_stats.median > 0.0
            && (beta_stats.max - beta_stats.min) > 0.15 * beta_stats.median
        {
            Some("similar mu, dispersed beta across workers: candidate load imbalance".into())
        } else {
            None
        };
        let summary = FunctionSummary {
            function: function.clone(),
            workers_with_records: data.rows.len(),
            beta: beta_stats,
            mu: mu_stats,
            sigma: component_stats(&sigmas),
            flagged_workers: flagged,
            note,
        };
        (verdicts, summary)
    };

    let entries: Vec<(&FunctionId, &FunctionRows)> = functions.iter().collect();
    let analyzed: Vec<(Vec<AnomalyVerdict>, FunctionSummary)> = if parallel {
        use rayon::prelude::*;
        entries
            .par_iter()
            .enumerate()
            .map(|(fidx, (function, data))| analyze(fidx, function, data))
            .collect()
    } else {
        entries
            .iter()
            .enumerate()
            .map(|(fidx, (function, data))| analyze(fidx, function, data))
            .collect()
    };
    let mut verdicts: Vec<AnomalyVerdict> = Vec::new();
    let mut summaries: Vec<FunctionSummary> = Vec::new();
    for (v, s) in analyzed {
        verdicts.extend(v);
        summaries.push(s);
    }

    // Abnormal findings first, ranked by D + delta; then the nearest misses.
    let score = |v: &AnomalyVerdict| v.d + v.delta;
    let (mut abnormal, mut rest): (Vec<_>, Vec<_>) = verdicts.into_iter().partition(|v| v.abnormal);
    let by_score = |a: &AnomalyVerdict, b: &AnomalyVerdict| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap()
            .then(a.worker.cmp(&b.worker))
            .then(a.function.cmp(&b.function))
    };
    abnormal.sort_by(by_score);
    rest.sort_by(by_score);
    rest.truncate(cfg.report_near_misses);
    let mut findings = abnormal;
    findings.extend(rest);

    Ok(AnomalyReport {
        version: crate::TOOLKIT_VERSION.into(),
        config: cfg.clone(),
        workers: n_workers,
        functions_evaluated: summaries.len(),
        ranking_note: "findings ordered abnormal-first, then by D + delta (toolkit-specific \
                       ranking; the criterion itself is unordered)"
            .into(),
        findings,
        summaries,
    })
}

/// Plain-text rendering of a report.
pub fn render_text(report: &AnomalyReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "# anomaly report (toolkit v{})", report.version);
    let _ = writeln!(
        out,
        "# workers: {}  functions evaluated: {}",
        report.workers, report.functions_evaluated
    );
    let _ = writeln!(out, "# {}", report.ranking_note);
    let _ = writeln!(
        out,
        "# config: beta_gate={} delta={} k={} peer_sample_cap={} seed={}",
        report.config.beta_gate,
        report.config.delta,
        report.config.k,
        report.config.peer_sample_cap,
        report.config.rng_seed
    );
    let abnormal = report.findings.iter().filter(|f| f.abnormal).count();
    let _ = writeln!(out, "# abnormal findings: {abnormal}");
    for f in &report.findings {
        if !f.abnormal {
            continue;
        }
        let stack = if f.function.call_stack.is_empty() {
            String::new()
        } else if f.function.call_stack.len() <= 3 {
            format!(" [{}]", f.function.call_stack.join(" > "))
        } else {
            let n = f.function.call_stack.len();
            format!(
                " [{} > ... > {}]",
                f.function.call_stack[0],
                f.function.call_stack[n - 1]
            )
        };
        let _ = writeln!(
            out,
            "worker {:>5}  {:?} {}{}  beta={:.4} mu={:.4} sigma={:.4}  D={:.4} delta={:.4} (thr {:.4})  {}",
            f.worker,
            f.function.kind,
            f.function.name,
            stack,
            f.pattern.beta,
            f.pattern.mu,
            f.pattern.sigma,
            f.d,
            f.delta,
            f.threshold,
            f.reason.map(|r| r.to_string()).unwrap_or_default()
        );
        let _ = writeln!(out, "             {}", f.description);
    }
    let _ = writeln!(out, "# per-function distributions");
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "fn {:?} {}  workers={} flagged={}  beta[{:.4},{:.4},{:.4}] mu[{:.4},{:.4},{:.4}] sigma[{:.4},{:.4},{:.4}]{}",
            s.function.kind,
            s.function.name,
            s.workers_with_records,
            s.flagged_workers,
            s.beta.min, s.beta.median, s.beta.max,
            s.mu.min, s.mu.median, s.mu.max,
            s.sigma.min, s.sigma.median, s.sigma.max,
            s.note.as_ref().map(|n| format!("  note: {n}")).unwrap_or_default()
        );
    }
    out
}

/// CSV of the per-function distributions, for external plotting.
pub fn render_csv(report: &AnomalyReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::from(
        "function,kind,workers,flagged,beta_min,beta_median,beta_max,mu_min,mu_median,mu_max,sigma_min,sigma_median,sigma_max\n",
    );
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "{},{:?},{},{},{},{},{},{},{},{},{},{},{}",
            s.function.name,
            s.function.kind,
            s.workers_with_records,
            s.flagged_workers,
            s.beta.min,
            s.beta.median,
            s.beta.max,
            s.mu.min,
            s.mu.median,
            s.mu.max,
            s.sigma.min,
            s.sigma.median,
            s.sigma.max
        );
    }
    out
}
