//! Fault-signature tests: the simulator's injected faults must surface in
//! the patterns and the localization output the way the corresponding real
//! incidents do.

mod common;

use std::collections::BTreeSet;

use tracediag_core::config::ToolkitConfig;
use tracediag_core::detector::{replay, DegradationDetector, DetectorConfig, Trigger};
use tracediag_core::localize::{localize, AnomalyReason, RangePolicy};
use tracediag_core::pattern::WorkerPatterns;
use tracediag_core::pipeline::summarize_traces;
use tracediag_core::simulator::{
    marker_stream, simulate, ClusterSpec, FaultKind, FaultSchedule, FaultSpec, GroundTruth,
    MarkerFault, MarkerStreamSpec, SimSpec, TargetSelector,
};
use tracediag_core::Value;

fn cluster(workers: u32, hosts: u32) -> ClusterSpec {
    let gpus = workers / hosts;
    ClusterSpec { workers, hosts, gpus_per_host: gpus, rings: gpus, ..ClusterSpec::default() }
}

fn spec(workers: u32, hosts: u32, window_s: f64, faults: Vec<FaultSpec>) -> SimSpec {
    SimSpec {
        cluster: cluster(workers, hosts),
        faults,
        seed: 7,
        window_seconds: window_s,
        sample_rate_hz: 1000,
    }
}

fn run(spec: &SimSpec) -> (Vec<WorkerPatterns>, GroundTruth, tracediag_core::localize::AnomalyReport) {
    let cfg = ToolkitConfig {
        window_seconds: spec.window_seconds,
        sample_rate_hz: spec.sample_rate_hz,
        ..ToolkitConfig::default()
    };
    let out = simulate(spec).unwrap();
    let patterns = summarize_traces(&out.traces, &cfg);
    let report = localize(patterns.clone(), &RangePolicy::from_config(&cfg), &cfg).unwrap();
    (patterns, out.truth, report)
}

fn comm_pattern(patterns: &[WorkerPatterns], rank: u32) -> (Value, Value, Value) {
    let wp = patterns.iter().find(|w| w.worker.rank() == rank).unwrap();
    let rec = wp
        .records
        .iter()
        .find(|r| r.function.name == "allreduce_ring")
        .unwrap_or_else(|| panic!("worker {rank} has no ring record"));
    (rec.pattern.beta, rec.pattern.mu, rec.pattern.sigma)
}

fn flagged_workers(report: &tracediag_core::localize::AnomalyReport) -> BTreeSet<u32> {
    report.findings.iter().filter(|f| f.abnormal).map(|f| f.worker).collect()
}

#[test]
fn healthy_cluster_produces_no_findings() {
    let (_, _, report) = run(&spec(16, 2, 4.0, vec![]));
    assert_eq!(flagged_workers(&report), BTreeSet::new());
}

#[test]
fn healthy_cluster_with_fewer_rings_is_one_cluster() {
    // 32 workers over 4 rings (two GPUs per host per ring): every worker's
    // communication pattern still lands in one peer cluster.
    let mut sim = spec(32, 4, 4.0, vec![]);
    sim.cluster.rings = 4;
    let (_, _, report) = run(&sim);
    assert_eq!(flagged_workers(&report), BTreeSet::new());
    let comm = report
        .summaries
        .iter()
        .find(|s| s.function.name == "allreduce_ring")
        .unwrap();
    assert_eq!(comm.workers_with_records, 32);
    assert!(comm.mu.max - comm.mu.min < 0.05, "{:?}", comm.mu);
}

#[test]
fn slow_bond_separates_three_worker_classes() {
    let fault = FaultSpec {
        kind: FaultKind::SlowNicBond,
        target: TargetSelector::Bond { host: 1, index: 3 },
        magnitude: 0.5,
        schedule: FaultSchedule::Always,
    };
    let sim = spec(32, 4, 6.0, vec![fault]);
    let (patterns, truth, report) = run(&sim);

    let red = 8 + 3; // host 1, gpu 3
    assert_eq!(truth.slow_bond_workers, BTreeSet::from([red]));
    let ring: BTreeSet<u32> = truth.ring_members[3].iter().copied().collect();
    assert!(ring.contains(&red));
    let blues: Vec<u32> = ring.iter().copied().filter(|&w| w != red).collect();
    let greens: Vec<u32> = (0..32).filter(|w| !ring.contains(w)).collect();
    assert_eq!(blues.len(), 3);
    assert_eq!(greens.len(), 28);

    let (red_beta, red_mu, red_sigma) = comm_pattern(&patterns, red);
    // The slow link sits below its waiting ring peers on both mu and sigma.
    for &b in &blues {
        let (_, blue_mu, blue_sigma) = comm_pattern(&patterns, b);
        assert!(red_mu < blue_mu, "red mu {red_mu} vs blue {blue_mu}");
        assert!(red_sigma < blue_sigma);
    }
    let blue_stats: Vec<_> = blues.iter().map(|&w| comm_pattern(&patterns, w)).collect();
    let green_stats: Vec<_> = greens.iter().map(|&w| comm_pattern(&patterns, w)).collect();

    // Out-of-ring throughput stays at capacity; the whole slow ring drops.
    let min_green_mu = green_stats.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let max_inring_mu = blue_stats.iter().map(|s| s.1).chain([red_mu]).fold(0.0, f64::max);
    assert!(
        min_green_mu > max_inring_mu,
        "green mu {min_green_mu} must exceed in-ring mu {max_inring_mu}"
    );
    // The slow link is stable while its ring peers fluctuate.
    let min_blue_sigma = blue_stats.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
    assert!(
        red_sigma * 2.0 <= min_blue_sigma,
        "red sigma {red_sigma} not 2x below blue sigma {min_blue_sigma}"
    );
    // The slow ring carries more of the window.
    let max_green_beta = green_stats.iter().map(|s| s.0).fold(0.0, f64::max);
    assert!(red_beta > max_green_beta);

    // Localization: the slow-link worker is a peer outlier, no out-of-ring
    // worker is flagged, and the slow link ranks first.
    let flagged = flagged_workers(&report);
    assert!(flagged.contains(&red), "slow-link worker not flagged: {flagged:?}");
    for g in &greens {
        assert!(!flagged.contains(g), "out-of-ring worker {g} flagged");
    }
    let red_comm = report
        .findings
        .iter()
        .find(|f| f.worker == red && f.function.name == "allreduce_ring")
        .unwrap();
    assert!(matches!(
        red_comm.reason,
        Some(AnomalyReason::PeerOutlier) | Some(AnomalyReason::Both)
    ));
    assert_eq!(report.findings[0].worker, red, "slow link should rank first");
}

#[test]
fn nvlink_down_shows_elevated_gpu_nic_mu() {
    let target = 2 * 8 + 5; // host 2, gpu 5
    let fault = FaultSpec {
        kind: FaultKind::NvlinkDown,
        target: TargetSelector::Worker { rank: target },
        magnitude: 0.5,
        schedule: FaultSchedule::Always,
    };
    let sim = spec(32, 4, 6.0, vec![fault]);
    let (patterns, truth, report) = run(&sim);
    assert_eq!(truth.nvlink_down_workers, BTreeSet::from([target]));

    let ring: BTreeSet<u32> = truth.ring_members[5].iter().copied().collect();
    let peers: Vec<u32> = ring.iter().copied().filter(|&w| w != target).collect();
    let (target_beta, target_mu, _) = comm_pattern(&patterns, target);
    let peer_mus: Vec<Value> = peers.iter().map(|&w| comm_pattern(&patterns, w).1).collect();
    let peer_mu_max = peer_mus.iter().cloned().fold(0.0, f64::max);
    assert!(
        target_mu >= 1.5 * peer_mu_max,
        "target mu {target_mu} not elevated over ring peers {peer_mu_max}"
    );
    // The affected ring is the high-beta group.
    let green_beta = comm_pattern(&patterns, 0).0;
    assert!(target_beta > 1.5 * green_beta);

    let flagged = flagged_workers(&report);
    assert!(flagged.contains(&target));
    assert!(flagged.is_subset(&ring), "flags outside the affected ring: {flagged:?}");
    let finding = report
        .findings
        .iter()
        .find(|f| f.worker == target && f.function.name == "allreduce_ring")
        .unwrap();
    assert!(finding.abnormal);
}

#[test]
fn gpu_throttle_flags_exactly_the_targets() {
    // Magnitude keeps the healthy workers' in-event ring wait inside the
    // collective expected-range box; the kernel signature stays wide.
    let faults = [FaultSpec {
            kind: FaultKind::GpuThrottle,
            target: TargetSelector::Host { host: 2 },
            magnitude: 0.78,
            schedule: FaultSchedule::Always,
        },
        FaultSpec {
            kind: FaultKind::GpuThrottle,
            target: TargetSelector::Host { host: 5 },
            magnitude: 0.78,
            schedule: FaultSchedule::Always,
        }];
    let sim = spec(64, 8, 6.0, vec![faults[0].clone(), faults[1].clone()]);
    let (patterns, truth, report) = run(&sim);
    let targets: BTreeSet<u32> = (16..24).chain(40..48).collect();
    assert_eq!(truth.throttled_workers, targets);

    assert_eq!(flagged_workers(&report), targets);
    for &t in &targets {
        let kernel_findings: Vec<_> = report
            .findings
            .iter()
            .filter(|f| {
                f.abnormal
                    && f.worker == t
                    && f.function.kind == tracediag_core::trace::FunctionKind::GpuComputeKernel
            })
            .collect();
        assert!(!kernel_findings.is_empty(), "worker {t} has no GPU-kernel finding");
    }
    // Signature: larger beta, smaller mu than the healthy majority.
    let gemm = |rank: u32| {
        let wp = patterns.iter().find(|w| w.worker.rank() == rank).unwrap();
        let r = wp.records.iter().find(|r| r.function.name == "gemm_fwd").unwrap();
        (r.pattern.beta, r.pattern.mu)
    };
    let (t_beta, t_mu) = gemm(16);
    let (h_beta, h_mu) = gemm(0);
    assert!(t_beta > h_beta, "throttled beta {t_beta} <= healthy {h_beta}");
    assert!(t_mu < 0.8 * h_mu, "throttled mu {t_mu} not below healthy {h_mu}");
}

#[test]
fn async_gc_flags_a_random_python_minority() {
    let fault = FaultSpec {
        kind: FaultKind::AsyncGc,
        target: TargetSelector::All,
        magnitude: 0.3,
        schedule: FaultSchedule::PerIteration { probability: 0.02 },
    };
    let mut gc_sets: Vec<BTreeSet<u32>> = Vec::new();
    for seed in [3u64, 4, 5] {
        let mut sim = spec(32, 4, 8.0, vec![fault.clone()]);
        sim.seed = seed;
        let (_, truth, report) = run(&sim);
        let gc_workers = truth.gc_workers();
        assert!(
            gc_workers.len() < 16,
            "gc should hit a minority, got {}",
            gc_workers.len()
        );
        let gc_findings: Vec<_> = report
            .findings
            .iter()
            .filter(|f| f.abnormal && f.function.name == "gc.collect")
            .collect();
        let flagged: BTreeSet<u32> = gc_findings.iter().map(|f| f.worker).collect();
        // Flagged iff the emitted pause fraction crosses the beta gate; skip
        // workers sitting within rounding distance of the boundary.
        let window = sim.window_seconds;
        for (&w, &s) in &truth.gc_seconds {
            if s > 0.011 * window {
                assert!(flagged.contains(&w), "seed {seed}: gc worker {w} ({s:.3}s) not flagged");
            }
            if s < 0.009 * window {
                assert!(!flagged.contains(&w), "seed {seed}: sub-gate gc worker {w} flagged");
            }
        }
        assert!(flagged.is_subset(&gc_workers), "seed {seed}: {flagged:?} vs {gc_workers:?}");
        for f in &gc_findings {
            assert!(
                matches!(
                    f.reason,
                    Some(AnomalyReason::OutOfExpectedRange) | Some(AnomalyReason::Both)
                ),
                "gc finding should be out of the Python expected range: {f:?}"
            );
            assert!(f.pattern.beta > 0.01);
        }
        gc_sets.push(gc_workers);
    }
    assert!(
        gc_sets.windows(2).any(|w| w[0] != w[1]),
        "gc workers should vary across seeds: {gc_sets:?}"
    );
}

#[test]
fn slow_storage_raises_dataloader_beta_everywhere() {
    let fault = FaultSpec {
        kind: FaultKind::SlowStorage,
        target: TargetSelector::All,
        magnitude: 0.05,
        schedule: FaultSchedule::Always,
    };
    let (_, _, report) = run(&spec(16, 2, 6.0, vec![fault]));
    let dl: Vec<_> = report
        .findings
        .iter()
        .filter(|f| f.abnormal && f.function.name == "dataloader.next")
        .collect();
    assert_eq!(dl.len(), 16, "every worker should flag the slow dataloader");
    assert!(dl.iter().all(|f| f.d > 0.0 && f.pattern.beta > 0.03));
}

#[test]
fn load_imbalance_disperses_beta_not_mu() {
    let fault = FaultSpec {
        kind: FaultKind::LoadImbalance,
        target: TargetSelector::All,
        magnitude: 0.2,
        schedule: FaultSchedule::Always,
    };
    let (_, truth, report) = run(&spec(32, 4, 6.0, vec![fault]));
    assert!(truth.imbalance_applied);
    let gemm = report
        .summaries
        .iter()
        .find(|s| s.function.name == "gemm_fwd")
        .unwrap();
    assert!(
        gemm.mu.max - gemm.mu.min < 0.1,
        "mu should stay similar: {:?}",
        gemm.mu
    );
    assert!(
        gemm.beta.max - gemm.beta.min > 0.15 * gemm.beta.median,
        "beta should disperse: {:?}",
        gemm.beta
    );
    assert_eq!(
        gemm.note.as_deref(),
        Some("similar mu, dispersed beta across workers: candidate load imbalance")
    );
    // No expectation violations: GPU kernels and comm stay inside their
    // boxes even at the spread extremes.
    assert!(report
        .findings
        .iter()
        .filter(|f| f.abnormal)
        .all(|f| f.reason == Some(AnomalyReason::PeerOutlier)));
}

#[test]
fn detector_fires_on_simulated_slowdown() {
    let stream = marker_stream(&MarkerStreamSpec {
        iterations: 160,
        faults: vec![MarkerFault::SlowFrom { iteration: 101, factor: 1.06 }],
        ..MarkerStreamSpec::default()
    });
    let mut det = DegradationDetector::new(DetectorConfig::default());
    let triggers = replay(&mut det, stream).unwrap();
    assert_eq!(triggers.len(), 1);
    assert!(matches!(triggers[0], Trigger::Slowdown { .. }));
}

#[test]
fn detector_fires_on_simulated_blockage() {
    let stream = marker_stream(&MarkerStreamSpec {
        iterations: 60,
        faults: vec![MarkerFault::BlockAt { iteration: 40, gap_multiplier: 6.0 }],
        ..MarkerStreamSpec::default()
    });
    let mut det = DegradationDetector::new(DetectorConfig::default());
    let triggers = replay(&mut det, stream).unwrap();
    assert_eq!(triggers.len(), 1, "{triggers:?}");
    assert!(matches!(triggers[0], Trigger::Blocked { .. }));
}
