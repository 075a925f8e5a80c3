//! Toolkit configuration. Every default matches the constants the analysis
//! was tuned with; all of them can be overridden by a config file, by
//! `TRACEDIAG_*` environment variables, or by CLI flags (flags win, then
//! env, then file, then defaults).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolkitConfig {
    /// Profiling window length in seconds.
    pub window_seconds: f64,
    /// Hardware metric sample rate.
    pub sample_rate_hz: u32,
    /// Minimum critical-path fraction for a function to be considered at all.
    pub beta_gate: Value,
    /// Manhattan-distance threshold of the peer-difference indicator.
    pub delta: Value,
    /// MAD multiplier in the peer-outlier criterion.
    pub k: Value,
    /// Peer sample size is min(peer_sample_cap, worker count).
    pub peer_sample_cap: usize,
    /// Samples at or below this value count as zeros in the critical-duration
    /// gap search.
    pub zero_eps: Value,
    /// Fraction of an execution's utilization mass the critical duration must
    /// carry.
    pub mass_fraction: Value,
    /// Optional floor for a degenerate (zero) MAD threshold; disabled by
    /// default, keeping the literal criterion.
    pub mad_floor: Option<Value>,
    /// Identical iteration sequences required before matching starts.
    pub detector_confirm: u32,
    /// Ring-buffer size of recent iteration durations.
    pub detector_window: u32,
    /// Events without a completed iteration match before re-learning.
    pub detector_relearn: u32,
    /// Slowdown fires when the recent mean exceeds the episode minimum by
    /// more than this percentage.
    pub slowdown_percent: f64,
    /// Blocked fires at gaps of this multiple of the mean iteration time.
    pub blocked_multiplier: f64,
    /// Trigger cool-down in seconds.
    pub trigger_cooldown_seconds: f64,
    /// Iterations of lead the coordinator plans ahead of rank-0.
    pub lead_iterations: u64,
    /// Seed for all randomized sampling.
    pub rng_seed: u64,
    /// Non-abnormal verdicts closest to the threshold kept in the report.
    pub report_near_misses: usize,
    /// Expected-range overrides per function class, as
    /// `[[beta_lo, beta_hi], [mu_lo, mu_hi], [sigma_lo, sigma_hi]]`.
    pub range_overrides: BTreeMap<String, [[Value; 2]; 3]>,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            window_seconds: 20.0,
            sample_rate_hz: 10_000,
            beta_gate: 0.01,
            delta: 0.4,
            k: 5.0,
            peer_sample_cap: 100,
            zero_eps: 0.01,
            mass_fraction: 0.8,
            mad_floor: None,
            detector_confirm: 10,
            detector_window: 50,
            detector_relearn: 200,
            slowdown_percent: 5.0,
            blocked_multiplier: 5.0,
            trigger_cooldown_seconds: 600.0,
            lead_iterations: 3,
            rng_seed: 0,
            report_near_misses: 20,
            range_overrides: BTreeMap::new(),
        }
    }
}

impl ToolkitConfig {
    pub fn window_ns(&self) -> i64 {
        (self.window_seconds * 1e9) as i64
    }

    pub fn sample_spacing_ns(&self) -> i64 {
        1_000_000_000 / self.sample_rate_hz as i64
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Apply `TRACEDIAG_*` environment overrides to the scalar fields.
    pub fn apply_env(&mut self) {
        fn get<T: std::str::FromStr>(name: &str) -> Option<T> {
            std::env::var(name).ok().and_then(|v| v.parse().ok())
        }
        macro_rules! over {
            ($field:ident, $var:literal) => {
                if let Some(v) = get(concat!("TRACEDIAG_", $var)) {
                    self.$field = v;
                }
            };
        }
        over!(window_seconds, "WINDOW_SECONDS");
        over!(sample_rate_hz, "SAMPLE_RATE_HZ");
        over!(beta_gate, "BETA_GATE");
        over!(delta, "DELTA");
        over!(k, "K");
        over!(peer_sample_cap, "PEER_SAMPLE_CAP");
        over!(zero_eps, "ZERO_EPS");
        over!(mass_fraction, "MASS_FRACTION");
        over!(detector_confirm, "DETECTOR_CONFIRM");
        over!(detector_window, "DETECTOR_WINDOW");
        over!(detector_relearn, "DETECTOR_RELEARN");
        over!(slowdown_percent, "SLOWDOWN_PERCENT");
        over!(blocked_multiplier, "BLOCKED_MULTIPLIER");
        over!(trigger_cooldown_seconds, "TRIGGER_COOLDOWN_SECONDS");
        over!(lead_iterations, "LEAD_ITERATIONS");
        over!(rng_seed, "RNG_SEED");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_constants() {
        let c = ToolkitConfig::default();
        assert_eq!(c.window_seconds, 20.0);
        assert_eq!(c.sample_rate_hz, 10_000);
        assert_eq!(c.sample_spacing_ns(), 100_000);
        assert_eq!(c.beta_gate, 0.01);
        assert_eq!(c.delta, 0.4);
        assert_eq!(c.k, 5.0);
        assert_eq!(c.peer_sample_cap, 100);
        assert_eq!(c.detector_confirm, 10);
        assert_eq!(c.detector_window, 50);
        assert_eq!(c.detector_relearn, 200);
        assert_eq!(c.slowdown_percent, 5.0);
        assert_eq!(c.blocked_multiplier, 5.0);
        assert_eq!(c.lead_iterations, 3);
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = ToolkitConfig::default();
        c.range_overrides
            .insert("py".into(), [[0.0, 0.02], [0.0, 1.0], [0.0, 1.0]]);
        let text = serde_json::to_string(&c).unwrap();
        let back: ToolkitConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
    }
}
