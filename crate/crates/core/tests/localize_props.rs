//! Localization properties: the box-distance grid oracle, max-normalization
//! scale absorption, permutation behavior, the beta gate, and byte-level
//! determinism.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracediag_core::config::ToolkitConfig;
use tracediag_core::localize::{
    distance_from_expectation, localize, max_normalize, AnomalyReason, ExpectedRange,
    RangePolicy,
};
use tracediag_core::pattern::{BehaviorPattern, PatternRecord, WorkerPatterns};
use tracediag_core::trace::{CommScope, FunctionId, MetricChannel, WorkerId};
use tracediag_core::Value;

fn pattern(beta: Value, mu: Value, sigma: Value) -> BehaviorPattern {
    BehaviorPattern { beta, mu, sigma, exec_count: 1, channel: Some(MetricChannel::GpuNicBandwidth) }
}

/// Independent per-axis lattice scan; the sum over axes is the minimal
/// Manhattan distance to the box.
fn grid_min_manhattan(p: [Value; 3], r: &ExpectedRange) -> Value {
    let axis = |x: Value, (lo, hi): (Value, Value)| -> Value {
        let mut best = (x - hi).abs().min((x - lo).abs());
        let mut v = lo;
        while v < hi {
            best = best.min((x - v).abs());
            v += 1e-3;
        }
        best
    };
    axis(p[0], r.beta) + axis(p[1], r.mu) + axis(p[2], r.sigma)
}

#[test]
fn box_distance_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let mut bounds = || {
            let a: Value = rng.gen_range(0.0..1.0);
            let b: Value = rng.gen_range(0.0..1.0);
            (a.min(b), a.max(b))
        };
        let r = ExpectedRange { beta: bounds(), mu: bounds(), sigma: bounds() };
        let p = pattern(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let closed_form = distance_from_expectation(&p, &r);
        let grid = grid_min_manhattan([p.beta, p.mu, p.sigma], &r);
        assert!(
            (closed_form - grid).abs() <= 2e-3,
            "closed {closed_form} vs grid {grid} for {p:?} in {r:?}"
        );
    }
}

fn comm_session(raw: &[(Value, Value, Value)]) -> Vec<WorkerPatterns> {
    raw.iter()
        .enumerate()
        .map(|(rank, &(b, m, s))| WorkerPatterns {
            worker: WorkerId(rank as u32),
            records: vec![PatternRecord {
                worker: WorkerId(rank as u32),
                function: FunctionId::comm("ar", CommScope::InterWorker),
                pattern: pattern(b, m, s),
            }],
        })
        .collect()
}

#[test]
fn dyadic_scaling_leaves_peer_flags_unchanged() {
    let cfg = ToolkitConfig::default();
    let policy = RangePolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let raw: Vec<(Value, Value, Value)> = (0..40)
            .map(|i| {
                let outlier = i == 7;
                (
                    rng.gen_range(0.15..0.25),
                    if outlier { rng.gen_range(0.1..0.2) } else { rng.gen_range(0.8..0.95) },
                    rng.gen_range(0.01..0.05),
                )
            })
            .collect();
        let base = localize(comm_session(&raw), &policy, &cfg).unwrap();
        for c in [0.5, 0.25, 0.125] {
            // Scale mu for every worker; max normalization absorbs it.
            let scaled: Vec<_> = raw.iter().map(|&(b, m, s)| (b, m * c, s)).collect();
            let report = localize(comm_session(&scaled), &policy, &cfg).unwrap();
            let key = |r: &tracediag_core::localize::AnomalyReport| {
                let mut v: Vec<(u32, [Value; 3], Value, bool)> = r
                    .findings
                    .iter()
                    .map(|f| (f.worker, f.normalized, f.delta, f.abnormal))
                    .collect();
                v.sort_by_key(|a| a.0);
                v
            };
            assert_eq!(key(&base), key(&report), "scale {c}");
        }
    }
}

#[test]
fn full_sampling_is_permutation_equivariant() {
    let cfg = ToolkitConfig::default();
    let policy = RangePolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let raw: Vec<(Value, Value, Value)> = (0..50)
        .map(|i| {
            let m = if i == 3 { 0.2 } else { rng.gen_range(0.85..0.95) };
            (0.2, m, 0.02)
        })
        .collect();
    let base = localize(comm_session(&raw), &policy, &cfg).unwrap();
    // Reverse the worker order; per-rank results must not move.
    let mut sources = comm_session(&raw);
    sources.reverse();
    let reversed = localize(sources, &policy, &cfg).unwrap();

    let by_rank = |r: &tracediag_core::localize::AnomalyReport| {
        let mut v: Vec<(u32, Value, Value, bool)> =
            r.findings.iter().map(|f| (f.worker, f.d, f.delta, f.abnormal)).collect();
        v.sort_by_key(|a| a.0);
        v
    };
    assert_eq!(by_rank(&base), by_rank(&reversed));
    let flagged: Vec<u32> = base.findings.iter().filter(|f| f.abnormal).map(|f| f.worker).collect();
    assert_eq!(flagged, vec![3]);
}

#[test]
fn absent_workers_participate_as_zero_patterns() {
    let cfg = ToolkitConfig::default();
    let policy = RangePolicy::default();
    // 30 workers run the function, 10 do not (no record at all).
    let mut sources = comm_session(&vec![(0.2, 0.9, 0.02); 30]);
    for rank in 30..40 {
        sources.push(WorkerPatterns { worker: WorkerId(rank), records: vec![] });
    }
    // A second function present everywhere keeps the empty workers in W.
    for (i, wp) in sources.iter_mut().enumerate() {
        wp.records.push(PatternRecord {
            worker: WorkerId(i as u32),
            function: FunctionId::gpu("k"),
            pattern: pattern(0.5, 0.9, 0.02),
        });
    }
    let report = localize(sources, &policy, &cfg).unwrap();
    assert_eq!(report.workers, 40);
    // The 30 active workers all differ from the 10 zero-pattern peers, but
    // they are the majority, so the threshold follows them; the zero workers
    // have no verdict on the comm function (no record). Nothing flags.
    let comm_flags: Vec<_> = report
        .findings
        .iter()
        .filter(|f| f.abnormal && f.function.name == "ar")
        .collect();
    assert!(comm_flags.is_empty(), "{comm_flags:?}");
}

#[test]
fn reports_are_byte_deterministic() {
    let cfg = ToolkitConfig { rng_seed: 42, ..ToolkitConfig::default() };
    let policy = RangePolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw: Vec<(Value, Value, Value)> = (0..300)
        .map(|_| (rng.gen_range(0.1..0.3), rng.gen_range(0.6..0.9), rng.gen_range(0.0..0.1)))
        .collect();
    let a = localize(comm_session(&raw), &policy, &cfg).unwrap();
    let b = localize(comm_session(&raw), &policy, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn below_gate_never_abnormal(
        betas in prop::collection::vec(0.0f64..0.01, 10..40),
        outlier_mu in 0.0f64..1.0,
    ) {
        let cfg = ToolkitConfig::default();
        let policy = RangePolicy::default();
        let raw: Vec<(Value, Value, Value)> = betas
            .iter()
            .enumerate()
            .map(|(i, &b)| (b, if i == 0 { outlier_mu } else { 0.9 }, 0.02))
            .collect();
        let report = localize(comm_session(&raw), &policy, &cfg).unwrap();
        prop_assert_eq!(report.findings.len(), 0);
    }

    #[test]
    fn distance_zero_iff_inside(
        b in 0.0f64..1.0, m in 0.0f64..1.0, s in 0.0f64..1.0,
        lo in 0.0f64..0.5, width in 0.0f64..0.5,
    ) {
        let r = ExpectedRange {
            beta: (lo, lo + width),
            mu: (0.0, 1.0),
            sigma: (0.0, 1.0),
        };
        let p = pattern(b, m, s);
        let d = distance_from_expectation(&p, &r);
        prop_assert_eq!(d == 0.0, r.contains(&p));
        prop_assert!(d >= 0.0);
    }

    #[test]
    fn normalization_bounds(rows in prop::collection::vec(
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30)) {
        let raw: Vec<[Value; 3]> = rows.iter().map(|&(a, b, c)| [a, b, c]).collect();
        let normalized = max_normalize(&raw);
        for row in &normalized {
            for v in row {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
        // Every component with a nonzero max attains 1 somewhere.
        for c in 0..3 {
            if raw.iter().any(|r| r[c] > 0.0) {
                prop_assert!(normalized.iter().any(|r| r[c] == 1.0));
            }
        }
    }
}

#[test]
fn many_python_offenders_flag_out_of_range() {
    // Python beta around 0.05 across many workers: a common problem, every
    // offender flagged against the expected range.
    let cfg = ToolkitConfig::default();
    let policy = RangePolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let sources: Vec<WorkerPatterns> = (0..3072)
        .map(|rank| WorkerPatterns {
            worker: WorkerId(rank),
            records: vec![PatternRecord {
                worker: WorkerId(rank),
                function: FunctionId::python(
                    "recv_into",
                    vec!["io.py:read".into(), "socket.py:recv_into".into()],
                ),
                pattern: BehaviorPattern {
                    beta: rng.gen_range(0.03..0.07),
                    mu: rng.gen_range(0.3..0.5),
                    sigma: rng.gen_range(0.05..0.1),
                    exec_count: 10,
                    channel: Some(MetricChannel::CpuUtilization),
                },
            }],
        })
        .collect();
    let report = localize(sources, &policy, &cfg).unwrap();
    let abnormal: Vec<_> = report.findings.iter().filter(|f| f.abnormal).collect();
    assert_eq!(abnormal.len(), 3072);
    assert!(abnormal.iter().all(|f| matches!(
        f.reason,
        Some(AnomalyReason::OutOfExpectedRange) | Some(AnomalyReason::Both)
    )));
    assert!(abnormal.iter().all(|f| f.d > 0.0));
}
