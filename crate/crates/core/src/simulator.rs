//! Fault-injecting trace simulator.
//!
//! Generates multi-worker sessions that reproduce the qualitative
//! fingerprints of healthy and degraded training: ring communication is a
//! chunked pipeline where every stage proceeds at the slowest link's rate,
//! so a ring with a slow link shows waiting workers alternating between
//! zero and full throughput while the slow link itself holds a low, stable
//! level; rings without the slow link stay at capacity.
//!
//! All randomness is seeded per (worker, purpose), so the same spec, fault
//! list, and seed produce a byte-identical session directory.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ToolkitConfig;
use crate::detector::{MarkerEvent, MarkerKind};
use crate::trace::{
    write_session_meta, write_worker_trace, CommScope, FunctionId, MetricChannel, MetricSeries,
    SessionMeta, TraceError, WorkerId, WorkerTrace,
};
use crate::TimeNs;

/// Seconds per phase of one training iteration, plus kernel counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationTemplate {
    pub dataloader_s: f64,
    pub h2d_copy_s: f64,
    pub forward_s: f64,
    pub tp_comm_s: f64,
    pub backward_s: f64,
    pub ring_comm_s: f64,
    pub optimizer_py_s: f64,
    pub optimizer_kernel_s: f64,
    pub idle_s: f64,
    pub forward_kernels: u32,
    pub backward_kernels: u32,
    /// Chunk stages of one ring collective.
    pub ring_stages: u32,
}

impl Default for IterationTemplate {
    fn default() -> Self {
        Self {
            dataloader_s: 0.005,
            h2d_copy_s: 0.020,
            forward_s: 0.390,
            tp_comm_s: 0.090,
            backward_s: 0.280,
            ring_comm_s: 0.150,
            optimizer_py_s: 0.005,
            optimizer_kernel_s: 0.052,
            idle_s: 0.008,
            forward_kernels: 6,
            backward_kernels: 4,
            ring_stages: 30,
        }
    }
}

impl IterationTemplate {
    pub fn healthy_iteration_s(&self) -> f64 {
        self.dataloader_s
            + self.h2d_copy_s
            + self.forward_s
            + self.tp_comm_s
            + self.backward_s
            + self.ring_comm_s
            + self.optimizer_py_s
            + self.optimizer_kernel_s
            + self.idle_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub workers: u32,
    pub hosts: u32,
    pub gpus_per_host: u32,
    /// Communication rings; ring r carries the workers with gpu % rings == r,
    /// linked head-to-tail across hosts. Defaults to gpus_per_host so every
    /// worker sends over its own NIC bond.
    pub rings: u32,
    /// Relative capacity of a healthy NIC bond.
    pub nic_bond_bandwidth: f64,
    pub iteration_template: IterationTemplate,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            workers: 32,
            hosts: 4,
            gpus_per_host: 8,
            rings: 8,
            nic_bond_bandwidth: 1.0,
            iteration_template: IterationTemplate::default(),
        }
    }
}

impl ClusterSpec {
    pub fn host_of(&self, rank: u32) -> u32 {
        rank / self.gpus_per_host
    }

    pub fn gpu_of(&self, rank: u32) -> u32 {
        rank % self.gpus_per_host
    }

    pub fn ring_of(&self, rank: u32) -> u32 {
        self.gpu_of(rank) % self.rings
    }

    /// Worker ranks of each ring, ordered by (host, gpu).
    pub fn ring_members(&self) -> Vec<Vec<u32>> {
        let mut rings = vec![Vec::new(); self.rings as usize];
        for rank in 0..self.workers {
            rings[self.ring_of(rank) as usize].push(rank);
        }
        rings
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.workers == 0 || self.hosts == 0 || self.gpus_per_host == 0 {
            return Err(SimError::SpecInvalid(
                "workers, hosts, gpus_per_host must be positive".into(),
            ));
        }
        if self.workers != self.hosts * self.gpus_per_host {
            return Err(SimError::SpecInvalid(format!(
                "workers {} != hosts {} x gpus_per_host {}",
                self.workers, self.hosts, self.gpus_per_host
            )));
        }
        if self.rings == 0 || self.rings > self.gpus_per_host {
            return Err(SimError::SpecInvalid(format!(
                "rings {} must be in 1..=gpus_per_host {}",
                self.rings, self.gpus_per_host
            )));
        }
        if !(self.nic_bond_bandwidth > 0.0 && self.nic_bond_bandwidth <= 1.0) {
            return Err(SimError::SpecInvalid("nic_bond_bandwidth must be in (0, 1]".into()));
        }
        if self.iteration_template.healthy_iteration_s() <= 0.0 {
            return Err(SimError::SpecInvalid("iteration template must have positive length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    SlowNicBond,
    GpuThrottle,
    NvlinkDown,
    AsyncGc,
    LoadImbalance,
    SlowStorage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum TargetSelector {
    Worker { rank: u32 },
    Host { host: u32 },
    /// One NIC bond, addressed as (host, gpu index).
    Bond { host: u32, index: u32 },
    All,
}

impl TargetSelector {
    fn selects(&self, spec: &ClusterSpec, rank: u32) -> bool {
        match *self {
            TargetSelector::Worker { rank: r } => r == rank,
            TargetSelector::Host { host } => spec.host_of(rank) == host,
            TargetSelector::Bond { host, index } => {
                spec.host_of(rank) == host && spec.gpu_of(rank) == index
            }
            TargetSelector::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[derive(Default)]
pub enum FaultSchedule {
    #[default]
    Always,
    Span { onset_s: f64, duration_s: f64 },
    PerIteration { probability: f64 },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: TargetSelector,
    /// Degradation factor in (0, 1] for bandwidth/frequency faults, pause
    /// seconds for AsyncGc, spread for LoadImbalance, iteration fraction for
    /// SlowStorage.
    pub magnitude: f64,
    #[serde(default)]
    pub schedule: FaultSchedule,
}

impl FaultSpec {
    fn validate(&self) -> Result<(), SimError> {
        let needs_unit = matches!(
            self.kind,
            FaultKind::SlowNicBond | FaultKind::GpuThrottle | FaultKind::NvlinkDown
        );
        if needs_unit && !(self.magnitude > 0.0 && self.magnitude <= 1.0) {
            return Err(SimError::SpecInvalid(format!(
                "{:?} magnitude {} must be in (0, 1]",
                self.kind, self.magnitude
            )));
        }
        if self.magnitude <= 0.0 {
            return Err(SimError::SpecInvalid(format!(
                "{:?} magnitude must be positive",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Complete simulation input; this is also the on-disk spec file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub cluster: ClusterSpec,
    pub faults: Vec<FaultSpec>,
    pub seed: u64,
    pub window_seconds: f64,
    pub sample_rate_hz: u32,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            cluster: ClusterSpec::default(),
            faults: Vec::new(),
            seed: 0,
            window_seconds: 20.0,
            sample_rate_hz: 10_000,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        self.cluster.validate()?;
        for f in &self.faults {
            f.validate()?;
        }
        if self.window_seconds <= 0.0 {
            return Err(SimError::SpecInvalid("window_seconds must be positive".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(SimError::SpecInvalid("sample_rate_hz must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    SpecInvalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// What was actually injected, for ground-truth comparison in tests.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub slow_bond_workers: BTreeSet<u32>,
    pub throttled_workers: BTreeSet<u32>,
    pub nvlink_down_workers: BTreeSet<u32>,
    /// In-window garbage-collection pause seconds actually emitted.
    pub gc_seconds: std::collections::BTreeMap<u32, f64>,
    pub storage_workers: BTreeSet<u32>,
    pub imbalance_applied: bool,
    pub ring_members: Vec<Vec<u32>>,
    pub healthy_iteration_s: f64,
    pub observed_iteration_s: f64,
}

impl GroundTruth {
    pub fn gc_workers(&self) -> BTreeSet<u32> {
        self.gc_seconds.keys().copied().collect()
    }
}

#[derive(Debug)]
pub struct SimOutput {
    pub traces: Vec<WorkerTrace>,
    pub truth: GroundTruth,
}

// --- chunk pipeline -----------------------------------------------------------

/// Lockstep timing of one ring: every stage lasts as long as the slowest
/// link needs for its chunk; faster links send and then wait.
#[derive(Debug, Clone)]
pub struct RingPipeline {
    pub stage_seconds: f64,
    pub send_seconds: Vec<f64>,
    /// Volume each link moves per stage (equal across links by lockstep).
    pub stage_volumes: Vec<f64>,
}

pub fn ring_pipeline(rates: &[f64], chunk: f64) -> RingPipeline {
    let r_min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(r_min > 0.0, "ring link rates must be positive");
    RingPipeline {
        stage_seconds: chunk / r_min,
        send_seconds: rates.iter().map(|r| chunk / r).collect(),
        stage_volumes: rates.iter().map(|r| r * (chunk / r)).collect(),
    }
}

// --- per-iteration fault modifiers ---------------------------------------------

#[derive(Debug, Clone, Copy)]
struct IterMods {
    dataloader_s: f64,
    compute_factor: f64,
    /// SM frequency multiplier; kernel time scales by its inverse.
    freq: f64,
    link_rate: f64,
    /// Rerouted intra-host traffic sharing the NIC.
    nic_extra: f64,
    nvlink_ok: bool,
    gc_pause_s: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

struct FaultEngine<'a> {
    spec: &'a SimSpec,
    /// Per-worker load-imbalance draw, fixed for the window.
    imbalance_u: Vec<f64>,
    gc_rngs: Vec<ChaCha8Rng>,
}

impl<'a> FaultEngine<'a> {
    fn new(spec: &'a SimSpec) -> Self {
        let imbalance_u = (0..spec.cluster.workers)
            .map(|r| {
                ChaCha8Rng::seed_from_u64(mix(spec.seed, r as u64, 0xB0)).gen_range(0.0..1.0)
            })
            .collect();
        let gc_rngs = (0..spec.cluster.workers)
            .map(|r| ChaCha8Rng::seed_from_u64(mix(spec.seed, r as u64, 0xA0)))
            .collect();
        Self { spec, imbalance_u, gc_rngs }
    }

    fn mods_for(&mut self, rank: u32, iter_start_s: f64, truth: &mut GroundTruth) -> IterMods {
        let tmpl = &self.spec.cluster.iteration_template;
        let mut m = IterMods {
            dataloader_s: tmpl.dataloader_s,
            compute_factor: 1.0,
            freq: 1.0,
            link_rate: self.spec.cluster.nic_bond_bandwidth,
            nic_extra: 0.0,
            nvlink_ok: true,
            gc_pause_s: 0.0,
        };
        for fault in &self.spec.faults {
            if !fault.target.selects(&self.spec.cluster, rank) {
                continue;
            }
            let active = match fault.schedule {
                FaultSchedule::Always => true,
                FaultSchedule::Span { onset_s, duration_s } => {
                    iter_start_s >= onset_s && iter_start_s < onset_s + duration_s
                }
                FaultSchedule::PerIteration { probability } => {
                    self.gc_rngs[rank as usize].gen_range(0.0..1.0) < probability
                }
            };
            if !active {
                continue;
            }
            match fault.kind {
                FaultKind::SlowNicBond => {
                    m.link_rate *= fault.magnitude;
                    truth.slow_bond_workers.insert(rank);
                }
                FaultKind::GpuThrottle => {
                    m.freq = fault.magnitude;
                    truth.throttled_workers.insert(rank);
                }
                FaultKind::NvlinkDown => {
                    m.nic_extra = fault.magnitude;
                    m.link_rate *= 1.0 - fault.magnitude.min(0.95);
                    m.nvlink_ok = false;
                    truth.nvlink_down_workers.insert(rank);
                }
                FaultKind::AsyncGc => {
                    m.gc_pause_s = fault.magnitude;
                }
                FaultKind::LoadImbalance => {
                    m.compute_factor = 1.0 + fault.magnitude * self.imbalance_u[rank as usize];
                    truth.imbalance_applied = true;
                }
                FaultKind::SlowStorage => {
                    let iter = tmpl.healthy_iteration_s();
                    m.dataloader_s = (fault.magnitude * iter).max(tmpl.dataloader_s);
                    truth.storage_workers.insert(rank);
                }
            }
        }
        m
    }
}

// --- channel activity ------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Activity {
    Level(f64),
    /// Ring transfer: quiet until `transfer_from`, then a duty cycle of
    /// `send_ns` active out of every `stage_ns`.
    Ring { transfer_from: TimeNs, stage_ns: TimeNs, send_ns: TimeNs, level: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: TimeNs,
    end: TimeNs,
    activity: Activity,
}

fn activity_at(seg: &Segment, ts: TimeNs) -> f64 {
    match seg.activity {
        Activity::Level(v) => v,
        Activity::Ring { transfer_from, stage_ns, send_ns, level } => {
            if ts < transfer_from {
                0.0
            } else if (ts - transfer_from) % stage_ns.max(1) < send_ns {
                level
            } else {
                0.0
            }
        }
    }
}

const ACTIVE_LEVEL: f64 = 0.97;
const SM_LEVEL: f64 = 0.95;
const SM_IDLE: f64 = 0.25;
const CPU_IDLE: f64 = 0.35;
const CPU_PY: f64 = 0.55;
const CPU_GC: f64 = 0.85;
const NVLINK_REROUTED: f64 = 0.05;

struct ChannelPlan {
    baseline: f64,
    segments: Vec<Segment>,
}

impl ChannelPlan {
    fn new(baseline: f64) -> Self {
        Self { baseline, segments: Vec::new() }
    }

    fn push(&mut self, start: TimeNs, end: TimeNs, activity: Activity) {
        if end > start {
            self.segments.push(Segment { start, end, activity });
        }
    }

    fn sample(
        &self,
        spec: &SimSpec,
        channel: MetricChannel,
        rank: u32,
        window_end: TimeNs,
    ) -> MetricSeries {
        let spacing = 1_000_000_000 / spec.sample_rate_hz as TimeNs;
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix(spec.seed, rank as u64, 0xC0 + channel as u64));
        let mut series = MetricSeries::new(channel);
        let mut cursor = 0usize;
        let mut ts: TimeNs = 0;
        while ts < window_end {
            while cursor < self.segments.len() && self.segments[cursor].end <= ts {
                cursor += 1;
            }
            let raw = match self.segments.get(cursor) {
                Some(s) if s.start <= ts => activity_at(s, ts),
                _ => self.baseline,
            };
            let noisy = (raw * rng.gen_range(0.97..1.03)).clamp(0.0, 1.0);
            series.timestamps.push(ts);
            series.values.push(noisy);
            ts += spacing;
        }
        series
    }
}

// --- event construction ---------------------------------------------------------

struct Names;

impl Names {
    fn train_step() -> FunctionId {
        FunctionId::python("train_step", vec!["train.py:train_step".into()])
    }
    fn dataloader() -> FunctionId {
        FunctionId::python(
            "dataloader.next",
            vec!["train.py:train_step".into(), "data/loader.py:next".into()],
        )
    }
    fn forward() -> FunctionId {
        FunctionId::python(
            "forward",
            vec!["train.py:train_step".into(), "model.py:forward".into()],
        )
    }
    fn gc() -> FunctionId {
        FunctionId::python(
            "gc.collect",
            vec![
                "train.py:train_step".into(),
                "model.py:forward".into(),
                "runtime/gc.py:collect".into(),
            ],
        )
    }
    fn optimizer() -> FunctionId {
        FunctionId::python(
            "optimizer.step",
            vec!["train.py:train_step".into(), "optim/optimizer.py:step".into()],
        )
    }
    fn memcpy() -> FunctionId {
        FunctionId::memory("memcpy_h2d")
    }
    fn stream_sync() -> FunctionId {
        FunctionId::memory("stream_sync")
    }
    fn tp_comm() -> FunctionId {
        FunctionId::comm("allreduce_tp", CommScope::IntraWorker)
    }
    fn ring_comm() -> FunctionId {
        FunctionId::comm("allreduce_ring", CommScope::InterWorker)
    }
    fn fwd_kernel(i: u32) -> FunctionId {
        FunctionId::gpu(["gemm_fwd", "attn_fwd", "layernorm_fwd"][(i % 3) as usize])
    }
    fn bwd_kernel(i: u32) -> FunctionId {
        FunctionId::gpu(["gemm_bwd", "attn_bwd"][(i % 2) as usize])
    }
    fn adam() -> FunctionId {
        FunctionId::gpu("adam_update")
    }
}

const PY_THREAD: u32 = 0;
const STREAM_THREAD: u32 = 1000;

fn ns(seconds: f64) -> TimeNs {
    (seconds * 1e9).round() as TimeNs
}

struct WorkerBuild {
    trace: WorkerTrace,
    window_end: TimeNs,
    sm: ChannelPlan,
    cpu: ChannelPlan,
    nvlink: ChannelPlan,
    nic: ChannelPlan,
}

impl WorkerBuild {
    fn new(rank: u32, window_end: TimeNs) -> Self {
        Self {
            trace: WorkerTrace::new(WorkerId(rank), (0, window_end)),
            window_end,
            sm: ChannelPlan::new(SM_IDLE),
            cpu: ChannelPlan::new(CPU_IDLE),
            nvlink: ChannelPlan::new(0.0),
            nic: ChannelPlan::new(0.0),
        }
    }

    fn event(&mut self, f: FunctionId, start: TimeNs, end: TimeNs, tid: u32, training: bool) {
        let end = end.min(self.window_end);
        if start < end {
            self.trace.push_event(f, start, end, tid, training);
        }
    }

    /// Tile [start, end) minus holes with GPU kernels.
    fn kernels(
        &mut self,
        start: TimeNs,
        end: TimeNs,
        holes: &[(TimeNs, TimeNs)],
        count: u32,
        name: fn(u32) -> FunctionId,
        level: f64,
    ) {
        if end <= start || count == 0 {
            return;
        }
        let quantum = ((end - start) / count as TimeNs).max(1);
        let mut free: Vec<(TimeNs, TimeNs)> = Vec::new();
        let mut cursor = start;
        for &(h0, h1) in holes {
            if h0 > cursor {
                free.push((cursor, h0.min(end)));
            }
            cursor = cursor.max(h1);
        }
        if cursor < end {
            free.push((cursor, end));
        }
        let mut i = 0u32;
        for (f0, f1) in free {
            let mut t = f0;
            while t < f1 {
                let e = (t + quantum).min(f1);
                if e > t {
                    self.event(name(i), t, e, STREAM_THREAD, false);
                    self.sm.push(t, e.min(self.window_end), Activity::Level(level));
                    i += 1;
                }
                t = e;
            }
        }
    }
}

/// Run the simulation in memory.
pub fn simulate(spec: &SimSpec) -> Result<SimOutput, SimError> {
    spec.validate()?;
    let cluster = &spec.cluster;
    let tmpl = &cluster.iteration_template;
    let window_end = ns(spec.window_seconds);

    let mut truth = GroundTruth {
        ring_members: cluster.ring_members(),
        healthy_iteration_s: tmpl.healthy_iteration_s(),
        ..GroundTruth::default()
    };
    let mut engine = FaultEngine::new(spec);
    let mut builds: Vec<WorkerBuild> =
        (0..cluster.workers).map(|r| WorkerBuild::new(r, window_end)).collect();

    #[derive(Clone, Copy)]
    struct WorkerIter {
        mods: IterMods,
        dl_end: f64,
        h2d_end: f64,
        fwd_end: f64,
        tp_end: f64,
        ready: f64,
        gc: Option<(f64, f64)>,
    }

    let mut t0 = 0.0f64;
    let mut guard = 0u64;
    while ns(t0) < window_end {
        let mut iters: Vec<WorkerIter> = Vec::with_capacity(cluster.workers as usize);
        for rank in 0..cluster.workers {
            let m = engine.mods_for(rank, t0, &mut truth);
            let dl_end = t0 + m.dataloader_s;
            let h2d_end = dl_end + tmpl.h2d_copy_s;
            let fwd_len = tmpl.forward_s * m.compute_factor / m.freq;
            let gc = (m.gc_pause_s > 0.0).then(|| {
                let g0 = h2d_end + 0.1 * fwd_len;
                (g0, g0 + m.gc_pause_s)
            });
            let pause = gc.map(|(a, b)| b - a).unwrap_or(0.0);
            let fwd_end = h2d_end + fwd_len + pause;
            let tp_end = fwd_end + tmpl.tp_comm_s;
            let ready = tp_end + tmpl.backward_s * m.compute_factor / m.freq;
            iters.push(WorkerIter { mods: m, dl_end, h2d_end, fwd_end, tp_end, ready, gc });
        }

        // Ring lockstep: a ring starts when all members are ready and runs at
        // its slowest link's rate; the optimizer barrier waits for all rings.
        let ring_rate: Vec<f64> = truth
            .ring_members
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|&r| iters[r as usize].mods.link_rate)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let ring_start: Vec<f64> = truth
            .ring_members
            .iter()
            .map(|members| members.iter().map(|&r| iters[r as usize].ready).fold(0.0, f64::max))
            .collect();
        let ring_end: Vec<f64> = ring_start
            .iter()
            .zip(&ring_rate)
            .map(|(s, r)| s + tmpl.ring_comm_s / r)
            .collect();
        let comm_done = ring_end.iter().cloned().fold(0.0f64, f64::max);
        let opt_end = comm_done + tmpl.optimizer_py_s;
        let adam_end = opt_end + tmpl.optimizer_kernel_s;
        let iter_end = adam_end + tmpl.idle_s;

        for rank in 0..cluster.workers {
            let wi = iters[rank as usize];
            let m = wi.mods;
            let b = &mut builds[rank as usize];
            let ri = cluster.ring_of(rank) as usize;
            let window_end = b.window_end;

            b.event(Names::train_step(), ns(t0), ns(iter_end), PY_THREAD, true);
            b.event(Names::dataloader(), ns(t0), ns(wi.dl_end), PY_THREAD, true);
            b.cpu.push(ns(t0), ns(wi.dl_end).min(window_end), Activity::Level(CPU_PY));
            b.event(Names::memcpy(), ns(wi.dl_end), ns(wi.h2d_end), STREAM_THREAD, false);

            b.event(Names::forward(), ns(wi.h2d_end), ns(wi.fwd_end), PY_THREAD, true);
            let mut holes: Vec<(TimeNs, TimeNs)> = Vec::new();
            if let Some((g0, g1)) = wi.gc {
                b.event(Names::gc(), ns(g0), ns(g1), PY_THREAD, true);
                b.cpu.push(ns(g0), ns(g1).min(window_end), Activity::Level(CPU_GC));
                holes.push((ns(g0), ns(g1)));
                let in_window = (g1.min(window_end as f64 / 1e9) - g0).max(0.0);
                if in_window > 0.0 {
                    *truth.gc_seconds.entry(rank).or_insert(0.0) += in_window;
                }
            }
            let sm_level = SM_LEVEL * m.freq;
            b.kernels(ns(wi.h2d_end), ns(wi.fwd_end), &holes, tmpl.forward_kernels, Names::fwd_kernel, sm_level);

            b.event(Names::tp_comm(), ns(wi.fwd_end), ns(wi.tp_end), STREAM_THREAD, false);
            let nvlink_level = if m.nvlink_ok { ACTIVE_LEVEL } else { NVLINK_REROUTED };
            b.nvlink.push(ns(wi.fwd_end), ns(wi.tp_end).min(window_end), Activity::Level(nvlink_level));

            b.kernels(ns(wi.tp_end), ns(wi.ready), &[], tmpl.backward_kernels, Names::bwd_kernel, sm_level);

            // Ring collective: opens at readiness, closes with the ring;
            // waiting for peers shows as silence the summarizer trims.
            let e0 = wi.ready;
            let e1 = ring_end[ri];
            b.event(Names::ring_comm(), ns(e0), ns(e1), STREAM_THREAD, false);
            let rate = ring_rate[ri];
            let stage_s = (tmpl.ring_comm_s / tmpl.ring_stages as f64) / rate;
            let send_s = if m.nic_extra > 0.0 { stage_s } else { stage_s * (rate / m.link_rate) };
            let nic_level = if m.nic_extra > 0.0 {
                ACTIVE_LEVEL * (m.link_rate + m.nic_extra).min(1.0)
            } else {
                ACTIVE_LEVEL * m.link_rate
            };
            b.nic.push(
                ns(e0),
                ns(e1).min(window_end),
                Activity::Ring {
                    transfer_from: ns(ring_start[ri]),
                    stage_ns: ns(stage_s).max(1),
                    send_ns: ns(send_s).max(1),
                    level: nic_level,
                },
            );

            // Waiting for slower rings before the optimizer barrier.
            if comm_done - e1 > 1e-6 {
                b.event(Names::stream_sync(), ns(e1), ns(comm_done), STREAM_THREAD, false);
            }

            b.event(Names::optimizer(), ns(comm_done), ns(opt_end), PY_THREAD, true);
            b.cpu.push(ns(comm_done), ns(opt_end).min(window_end), Activity::Level(CPU_PY));
            b.event(Names::adam(), ns(opt_end), ns(adam_end), STREAM_THREAD, false);
            b.sm.push(ns(opt_end), ns(adam_end).min(window_end), Activity::Level(sm_level));
        }

        truth.observed_iteration_s = iter_end - t0;
        t0 = iter_end;
        guard += 1;
        if guard > 1_000_000 {
            return Err(SimError::SpecInvalid("iteration template too short for the window".into()));
        }
    }

    let traces = builds
        .into_iter()
        .enumerate()
        .map(|(rank, mut b)| {
            let rank = rank as u32;
            b.trace.metrics = vec![
                b.sm.sample(spec, MetricChannel::GpuSmFrequency, rank, window_end),
                b.cpu.sample(spec, MetricChannel::CpuUtilization, rank, window_end),
                b.nvlink.sample(spec, MetricChannel::NvlinkUtilization, rank, window_end),
                b.nic.sample(spec, MetricChannel::GpuNicBandwidth, rank, window_end),
            ];
            b.trace.finalize().map_err(|reason| {
                SimError::SpecInvalid(format!("generated trace invalid: {reason}"))
            })?;
            Ok(b.trace)
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    Ok(SimOutput { traces, truth })
}

/// Simulate and write a session directory (`session.json` plus one trace
/// file per worker).
pub fn simulate_to_dir(
    spec: &SimSpec,
    dir: &Path,
    cfg: &ToolkitConfig,
) -> Result<(SessionMeta, GroundTruth), SimError> {
    let out = simulate(spec)?;
    std::fs::create_dir_all(dir).map_err(TraceError::Io)?;
    let mut cfg = cfg.clone();
    cfg.window_seconds = spec.window_seconds;
    cfg.sample_rate_hz = spec.sample_rate_hz;
    let meta = SessionMeta {
        window_start_ns: 0,
        window_end_ns: ns(spec.window_seconds),
        sample_rate_hz: spec.sample_rate_hz,
        workers: spec.cluster.workers,
        config: cfg,
    };
    write_session_meta(dir, &meta)?;
    for trace in &out.traces {
        write_worker_trace(trace, dir)?;
    }
    Ok((meta, out.truth))
}

// --- marker streams -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MarkerFault {
    /// Iterations from `iteration` on take `factor` times as long.
    SlowFrom { iteration: u32, factor: f64 },
    /// One mid-iteration stall of `gap_multiplier` mean durations.
    BlockAt { iteration: u32, gap_multiplier: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerStreamSpec {
    pub iterations: u32,
    pub base_seconds: f64,
    /// dataloader-next markers per iteration.
    pub nexts: u32,
    /// optimizer-step markers per iteration.
    pub steps: u32,
    pub faults: Vec<MarkerFault>,
}

impl Default for MarkerStreamSpec {
    fn default() -> Self {
        Self { iterations: 100, base_seconds: 1.0, nexts: 1, steps: 1, faults: Vec::new() }
    }
}

/// Generate the marker stream a worker would emit: `nexts` dataloader
/// markers at the iteration head, `steps` optimizer markers at the tail.
pub fn marker_stream(spec: &MarkerStreamSpec) -> Vec<MarkerEvent> {
    let mut out = Vec::with_capacity((spec.iterations * (spec.nexts + spec.steps)) as usize);
    let mut t = 0.0f64;
    let head = 0.001 * spec.base_seconds;
    for it in 0..spec.iterations {
        let mut duration = spec.base_seconds;
        for f in &spec.faults {
            if let MarkerFault::SlowFrom { iteration, factor } = *f {
                if it >= iteration {
                    duration = spec.base_seconds * factor;
                }
            }
        }
        let stall = spec.faults.iter().find_map(|f| match *f {
            MarkerFault::BlockAt { iteration, gap_multiplier } if iteration == it => {
                Some(gap_multiplier * spec.base_seconds)
            }
            _ => None,
        });

        for k in 0..spec.nexts {
            out.push(MarkerEvent { kind: MarkerKind::DataloaderNext, ts: ns(t + k as f64 * head) });
        }
        if let Some(gap) = stall {
            t += gap;
        }
        let tail = t + duration;
        for k in 0..spec.steps {
            let back = (spec.steps - 1 - k) as f64 * head;
            out.push(MarkerEvent { kind: MarkerKind::OptimizerStep, ts: ns(tail - back) });
        }
        t = tail;
    }
    out
}

/// Map trace events to marker events by function name, for `detect` runs
/// against recorded sessions.
pub fn markers_from_trace(trace: &WorkerTrace) -> Vec<MarkerEvent> {
    let mut out: Vec<MarkerEvent> = trace
        .events
        .iter()
        .filter_map(|e| {
            let name = &trace.function(e.func).name;
            let kind = if name == "dataloader.next" {
                MarkerKind::DataloaderNext
            } else if name == "optimizer.step" {
                MarkerKind::OptimizerStep
            } else {
                return None;
            };
            Some(MarkerEvent { kind, ts: e.start })
        })
        .collect();
    out.sort_by_key(|m| m.ts);
    out
}

/// Session directory digest over file names and bytes, for determinism
/// checks.
pub fn session_digest(dir: &Path) -> std::io::Result<u64> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    };
    for p in names {
        eat(p.file_name().unwrap().to_string_lossy().as_bytes());
        eat(&std::fs::read(&p)?);
    }
    Ok(h)
}
