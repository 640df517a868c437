//! Trace-driven discrete-event simulation of decode serving.

mod engine;
mod ledger;
mod net;
mod trace;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use engine::{run_disaggregated, run_homogeneous, simulate, IterationRecord, SimOutcome};
pub use ledger::KvLedger;
pub use net::{xfer_time, NetPreset};
pub use trace::{gen_trace, read_trace_csv, write_trace_csv, TraceProfile, DEFAULT_SIGMA};

use crate::perf::EfficiencyProfile;

pub const DEFAULT_HEADROOM: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Eager Q send with previous-token attention overlapping the rest of the slice.
    pub overlap: bool,
    /// Concurrent sub-batches; 1 disables staggered pipelining.
    pub n_batches: u64,
    pub seed: u64,
    pub efficiency: EfficiencyProfile,
    /// Fraction of pool memory held back from the KV cache.
    pub headroom: f64,
    /// Overrides the preset named in the cluster config.
    #[serde(skip)]
    pub network: Option<NetPreset>,
    /// Stop processing events after this many seconds of simulated time.
    pub horizon_s: Option<f64>,
    pub record_iterations: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            overlap: false,
            n_batches: 1,
            seed: 0,
            efficiency: EfficiencyProfile::default(),
            headroom: DEFAULT_HEADROOM,
            network: None,
            horizon_s: None,
            record_iterations: false,
        }
    }
}

/// Time-between-tokens distribution, seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TbtStats {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub tokens_generated: u64,
    /// Seconds from t = 0 to the last generated token.
    pub wall_time: f64,
    /// tokens/s
    pub throughput: f64,
    pub tbt: TbtStats,
    /// Time-weighted mean running batch size.
    pub avg_batch: f64,
    pub peak_batch: u64,
    /// Busy fraction per pool.
    pub util: BTreeMap<String, f64>,
    pub cost_per_hour: f64,
    pub tokens_per_dollar: f64,
    pub requests_completed: u64,
    pub requests_rejected: u64,
    pub requests_pending: u64,
    pub iterations: u64,
    pub kv_capacity_bytes: u64,
    pub kv_peak_bytes: u64,
    pub kv_violations: u64,
    pub overlap: bool,
    pub n_batches: u64,
    pub seed: u64,
    pub notes: Vec<String>,
}

impl SimMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Weighted nearest-rank percentile over `(value, weight)` pairs sorted by value.
pub(crate) fn weighted_percentile(sorted: &[(u64, u64)], total: u64, q: f64) -> u64 {
    if total == 0 {
        return 0;
    }
    let rank = ((q * total as f64).ceil() as u64).clamp(1, total);
    let mut seen = 0;
    for &(v, w) in sorted {
        seen += w;
        if seen >= rank {
            return v;
        }
    }
    sorted.last().map(|&(v, _)| v).unwrap_or(0)
}
