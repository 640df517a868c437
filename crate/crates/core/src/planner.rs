//! Exhaustive search over small device grids, ranked by tokens per dollar.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{ClusterConfig, ClusterMode, DeviceSpec, LlmSpec, TraceRecord};
use crate::par;
use crate::sim::{simulate, SimMetrics, SimOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DopLimits {
    pub a_max: u64,
    pub b_max: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    pub sim: SimOptions,
    /// Relative throughput gain from one more memory device below which a
    /// configuration is flagged compute-saturated.
    pub saturation_gain: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            sim: SimOptions::default(),
            saturation_gain: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanResult {
    pub config: ClusterConfig,
    pub metrics: SimMetrics,
    pub cost_per_hour: f64,
    pub tokens_per_dollar: f64,
    /// 1 is best.
    pub rank: usize,
    pub compute_saturated: bool,
}

impl PlanResult {
    pub fn dop(&self) -> (u64, u64) {
        self.config.dop()
    }

    pub fn is_disaggregated(&self) -> bool {
        self.config.mode == ClusterMode::Disaggregated
    }
}

/// Every `(a, b)` in the grid whose weights fit on `a` compute devices, then the
/// homogeneous `(a, 0)` baselines that fit.
pub fn enumerate_dops(
    limits: DopLimits,
    model: &LlmSpec,
    compute: &DeviceSpec,
    memory: &DeviceSpec,
    network: &str,
) -> Result<Vec<ClusterConfig>> {
    if limits.a_max < 1 || limits.b_max < 1 {
        return Err(invalid("dop limits", "a_max and b_max must be >= 1"));
    }
    let fits = |a: u64| model.weight_bytes <= a as f64 * compute.mem_bytes;
    let mut out = Vec::new();
    for a in (1..=limits.a_max).filter(|&a| fits(a)) {
        for b in 1..=limits.b_max {
            out.push(ClusterConfig::disaggregated(compute, a, memory, b, network)?);
        }
    }
    for a in (1..=limits.a_max).filter(|&a| fits(a)) {
        out.push(ClusterConfig::homogeneous(compute, a)?);
    }
    Ok(out)
}

fn rank_order(x: &PlanResult, y: &PlanResult) -> Ordering {
    y.tokens_per_dollar
        .total_cmp(&x.tokens_per_dollar)
        .then(x.cost_per_hour.total_cmp(&y.cost_per_hour))
        .then_with(|| x.config.label().cmp(&y.config.label()))
}

/// Simulate every configuration and rank by tokens per dollar.
///
/// Configurations that cannot host the model under the simulation options
/// (weights plus headroom, replica split) are dropped.
pub fn plan(
    model: &LlmSpec,
    trace: &[TraceRecord],
    configs: &[ClusterConfig],
    opts: &PlanOptions,
) -> Result<Vec<PlanResult>> {
    if configs.is_empty() {
        return Err(Error::NoFeasibleConfig);
    }
    let runs = par::map(configs, |c| simulate(model, c, trace, &opts.sim).map(|o| (c.clone(), o.metrics)));
    let mut results = Vec::new();
    for run in runs {
        match run {
            Ok((config, metrics)) => results.push(PlanResult {
                cost_per_hour: config.cost_per_hour(),
                tokens_per_dollar: metrics.tokens_per_dollar,
                config,
                metrics,
                rank: 0,
                compute_saturated: false,
            }),
            Err(Error::WeightsExceedMemory { .. } | Error::Invalid { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if results.is_empty() {
        return Err(Error::NoFeasibleConfig);
    }
    let flags: Vec<bool> = results.iter().map(|r| saturated(r, &results, opts.saturation_gain)).collect();
    for (r, f) in results.iter_mut().zip(flags) {
        r.compute_saturated = f;
    }
    results.sort_by(rank_order);
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(results)
}

fn saturated(r: &PlanResult, all: &[PlanResult], gain: f64) -> bool {
    if !r.is_disaggregated() {
        return false;
    }
    let (a, b) = r.dop();
    all.iter()
        .filter(|o| o.is_disaggregated() && o.dop() == (a, b.wrapping_sub(1)))
        .any(|prev| {
            prev.metrics.throughput > 0.0 && r.metrics.throughput / prev.metrics.throughput - 1.0 < gain
        })
}

/// A disaggregated and a homogeneous configuration of roughly the same price.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub disaggregated: String,
    pub homogeneous: String,
    pub cost_ratio: f64,
    pub throughput_gain: f64,
    pub batch_ratio: f64,
    pub tbt_ratio: f64,
}

pub fn compare(disagg: &PlanResult, homog: &PlanResult) -> Comparison {
    let ratio = |x: f64, y: f64| if y > 0.0 { x / y } else { f64::NAN };
    Comparison {
        disaggregated: disagg.config.label(),
        homogeneous: homog.config.label(),
        cost_ratio: ratio(disagg.cost_per_hour, homog.cost_per_hour),
        throughput_gain: ratio(disagg.metrics.throughput, homog.metrics.throughput) - 1.0,
        batch_ratio: ratio(disagg.metrics.avg_batch, homog.metrics.avg_batch),
        tbt_ratio: ratio(disagg.metrics.tbt.mean, homog.metrics.tbt.mean),
    }
}

/// All disaggregated/homogeneous pairs whose hourly costs are within `tolerance`.
pub fn equal_cost_pairs(results: &[PlanResult], tolerance: f64) -> Vec<Comparison> {
    let mut out = Vec::new();
    for d in results.iter().filter(|r| r.is_disaggregated()) {
        for h in results.iter().filter(|r| !r.is_disaggregated()) {
            if (d.cost_per_hour / h.cost_per_hour - 1.0).abs() <= tolerance {
                out.push(compare(d, h));
            }
        }
    }
    out
}

pub fn write_plan_csv<W: Write>(results: &[PlanResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "a",
        "b",
        "cost_per_hr",
        "throughput_tps",
        "avg_batch",
        "tbt_p50_ms",
        "tokens_per_dollar",
        "rank",
    ])?;
    for r in results {
        let (a, b) = r.dop();
        out.write_record([
            a.to_string(),
            b.to_string(),
            format!("{:.2}", r.cost_per_hour),
            format!("{:.3}", r.metrics.throughput),
            format!("{:.3}", r.metrics.avg_batch),
            format!("{:.3}", r.metrics.tbt.p50 * 1e3),
            format!("{:.1}", r.tokens_per_dollar),
            r.rank.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
