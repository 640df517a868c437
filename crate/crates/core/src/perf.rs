//! Analytic decode-phase cost model: operator flop/byte counts, roofline
//! timing, utilization, KV-cache accounting and the interconnect bandwidth
//! needed to keep network overhead under a latency budget.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{DeviceSpec, LlmSpec, PoolCapacity};

/// Flops and device-memory traffic of one operator class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub flops: f64,
    pub bytes: f64,
}

impl OpCost {
    pub const ZERO: OpCost = OpCost {
        flops: 0.0,
        bytes: 0.0,
    };

    pub fn intensity(&self) -> f64 {
        self.flops / self.bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Bandwidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Gemm,
    Attention,
}

/// Achievable fraction of peak for each operator class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyProfile {
    pub gemm_eff: f64,
    pub attn_mbu: f64,
}

impl Default for EfficiencyProfile {
    fn default() -> Self {
        EfficiencyProfile {
            gemm_eff: 0.55,
            attn_mbu: 0.80,
        }
    }
}

impl EfficiencyProfile {
    pub fn new(gemm_eff: f64, attn_mbu: f64) -> Result<Self> {
        for (name, v) in [("gemm_eff", gemm_eff), ("attn_mbu", attn_mbu)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid("efficiency profile", format!("{name}={v} not in (0, 1]")));
            }
        }
        Ok(EfficiencyProfile { gemm_eff, attn_mbu })
    }

    pub fn for_kind(&self, kind: OpKind) -> f64 {
        match kind {
            OpKind::Gemm => self.gemm_eff,
            OpKind::Attention => self.attn_mbu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflineTime {
    pub seconds: f64,
    pub bound: Bound,
}

/// Where the timings fed to [`min_bandwidth`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingSource {
    Roofline,
    Measured,
}

/// Per-iteration decode timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingEstimate {
    pub t_model: f64,
    pub t_attn: f64,
    pub t_net: f64,
    pub model_bound: Bound,
    pub attn_bound: Bound,
    pub source: TimingSource,
}

fn check_batch(batch: u64) -> Result<()> {
    if batch < 1 {
        return Err(Error::Precondition(format!("batch must be >= 1, got {batch}")));
    }
    Ok(())
}

/// Non-attention operators for a batch of `batch` tokens: 2NB flops, e(N + 2Bd) bytes.
pub fn nonattn_cost(spec: &LlmSpec, batch: u64) -> Result<OpCost> {
    check_batch(batch)?;
    let n = spec.n_params as f64;
    let b = batch as f64;
    let e = spec.bytes_per_elem as f64;
    let d = spec.hidden_dim as f64;
    Ok(OpCost {
        flops: 2.0 * n * b,
        bytes: e * (n + 2.0 * b * d),
    })
}

pub fn nonattn_intensity(spec: &LlmSpec, batch: u64) -> Result<f64> {
    Ok(nonattn_cost(spec, batch)?.intensity())
}

/// Attention over `context_tokens` cached tokens in total (summed over the batch).
///
/// Only KV-cache reads are counted as traffic; the per-token q/k/v/output
/// vectors are excluded.
pub fn attn_cost_tokens(spec: &LlmSpec, context_tokens: u64) -> OpCost {
    let t = context_tokens as f64;
    let d = spec.hidden_dim as f64;
    let l = spec.layers as f64;
    OpCost {
        flops: 4.0 * t * d * l,
        bytes: kv_bytes_per_token(spec) * t,
    }
}

/// Attention for `batch` requests each holding `seq_len` cached tokens.
pub fn attn_cost(spec: &LlmSpec, batch: u64, seq_len: u64) -> Result<OpCost> {
    check_batch(batch)?;
    if seq_len < 1 {
        return Err(Error::Precondition(format!("seq_len must be >= 1, got {seq_len}")));
    }
    Ok(attn_cost_tokens(spec, batch * seq_len))
}

/// Roofline time on an aggregated pool.
pub fn roofline_on(cost: OpCost, pool: &PoolCapacity, eff: &EfficiencyProfile, kind: OpKind) -> RooflineTime {
    let f = eff.for_kind(kind);
    let compute = if cost.flops == 0.0 {
        0.0
    } else {
        cost.flops / (pool.peak_flops * f)
    };
    let memory = if cost.bytes == 0.0 {
        0.0
    } else {
        cost.bytes / (pool.mem_bw * f)
    };
    if compute >= memory {
        RooflineTime {
            seconds: compute,
            bound: Bound::Compute,
        }
    } else {
        RooflineTime {
            seconds: memory,
            bound: Bound::Bandwidth,
        }
    }
}

/// Roofline time for `count` identical devices.
pub fn roofline_time(
    cost: OpCost,
    device: &DeviceSpec,
    count: u64,
    eff: &EfficiencyProfile,
    kind: OpKind,
) -> Result<RooflineTime> {
    if count < 1 {
        return Err(Error::Precondition("device count must be >= 1".into()));
    }
    Ok(roofline_on(cost, &PoolCapacity::of(device, count), eff, kind))
}

fn check_time(time: f64) -> Result<()> {
    if !(time > 0.0) {
        return Err(Error::Precondition(format!("time must be > 0, got {time}")));
    }
    Ok(())
}

/// Model flops utilization. Values above 1 mean the inputs are inconsistent.
pub fn mfu(flops: f64, time: f64, pool: &PoolCapacity) -> Result<f64> {
    check_time(time)?;
    Ok(flops / (time * pool.peak_flops))
}

/// Model bandwidth utilization.
pub fn mbu(bytes: f64, time: f64, pool: &PoolCapacity) -> Result<f64> {
    check_time(time)?;
    Ok(bytes / (time * pool.mem_bw))
}

/// K and V bytes stored per token across all layers: 2·e·(d/G)·L.
pub fn kv_bytes_per_token(spec: &LlmSpec) -> f64 {
    let kv_dim = spec.hidden_dim as f64 / spec.gqa_group as f64;
    2.0 * spec.bytes_per_elem as f64 * kv_dim * spec.layers as f64
}

/// How many requests of context `seq_len` fit in `mem_bytes` after reserving
/// `weight_bytes` and a `headroom` fraction of the memory.
pub fn max_batch(
    mem_bytes: f64,
    weight_bytes: f64,
    spec: &LlmSpec,
    seq_len: u64,
    headroom: f64,
) -> Result<u64> {
    if !(0.0..1.0).contains(&headroom) {
        return Err(invalid("headroom", format!("{headroom} not in [0, 1)")));
    }
    let usable = mem_bytes - weight_bytes - headroom * mem_bytes;
    if weight_bytes > mem_bytes || usable < 0.0 {
        return Err(Error::WeightsExceedMemory {
            weights: weight_bytes,
            memory: mem_bytes,
        });
    }
    let per_request = kv_bytes_per_token(spec) * seq_len.max(1) as f64;
    Ok((usable / per_request).floor() as u64)
}

/// Bytes crossing the network per decode iteration: (2 + 2/G)·e·d·B·L.
pub fn comm_volume(spec: &LlmSpec, batch: u64) -> Result<f64> {
    check_batch(batch)?;
    let g = spec.gqa_group as f64;
    Ok((2.0 + 2.0 / g)
        * spec.bytes_per_elem as f64
        * spec.hidden_dim as f64
        * batch as f64
        * spec.layers as f64)
}

/// Per-layer message sizes: (query + new K/V sent, attention output returned).
pub fn layer_messages(spec: &LlmSpec, batch: u64) -> LayerMessages {
    let edb = spec.bytes_per_elem as f64 * spec.hidden_dim as f64 * batch as f64;
    LayerMessages {
        q_bytes: edb,
        kv_bytes: 2.0 * edb / spec.gqa_group as f64,
        out_bytes: edb,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMessages {
    pub q_bytes: f64,
    pub kv_bytes: f64,
    pub out_bytes: f64,
}

impl LayerMessages {
    pub fn total(&self) -> f64 {
        self.q_bytes + self.kv_bytes + self.out_bytes
    }
}

/// Interconnect bandwidth that keeps network time below `alpha` of the
/// compute time of one iteration.
pub fn min_bandwidth(spec: &LlmSpec, batch: u64, alpha: f64, timing: &TimingEstimate) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Precondition(format!("alpha must be > 0, got {alpha}")));
    }
    if !(timing.t_model > 0.0 && timing.t_attn > 0.0) {
        return Err(Error::Precondition("timings must be > 0".into()));
    }
    Ok(comm_volume(spec, batch)? / (alpha * (timing.t_model + timing.t_attn)))
}

/// Roofline timing of one decode iteration of `batch` requests at context
/// `seq_len`, non-attention on `compute` and attention on `memory`.
pub fn estimate_timing(
    spec: &LlmSpec,
    batch: u64,
    seq_len: u64,
    compute: &PoolCapacity,
    memory: &PoolCapacity,
    eff: &EfficiencyProfile,
) -> Result<TimingEstimate> {
    let m = roofline_on(nonattn_cost(spec, batch)?, compute, eff, OpKind::Gemm);
    let a = roofline_on(attn_cost(spec, batch, seq_len)?, memory, eff, OpKind::Attention);
    Ok(TimingEstimate {
        t_model: m.seconds,
        t_attn: a.seconds,
        t_net: 0.0,
        model_bound: m.bound,
        attn_bound: a.bound,
        source: TimingSource::Roofline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_catalog;

    fn llama3() -> LlmSpec {
        builtin_catalog().model("llama3-70b").unwrap().clone()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn nonattn_cost_values() {
        let s = llama3();
        assert_eq!(nonattn_cost(&s, 256).unwrap().flops, 3.584e13);
        let c = nonattn_cost(&s, 1).unwrap();
        assert_eq!(c.bytes, 2.0 * (70e9 + 2.0 * 8192.0));
        assert!(rel(c.bytes, 1.4000e11) < 1e-3);
        assert!(matches!(nonattn_cost(&s, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn nonattn_intensity_is_about_batch_when_small() {
        let s = llama3();
        assert!((nonattn_intensity(&s, 1).unwrap() - 1.0).abs() < 1e-3);
        let v: Vec<f64> = [1, 8, 64, 512]
            .iter()
            .map(|&b| nonattn_intensity(&s, b).unwrap())
            .collect();
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn attention_intensity_is_2g_over_e() {
        let s = llama3();
        for (b, l) in [(1, 1), (7, 300), (256, 8192)] {
            let c = attn_cost(&s, b, l).unwrap();
            assert!((c.intensity() - 8.0).abs() < 1e-12);
        }
        let mut g1 = s.clone();
        g1.gqa_group = 1;
        assert!((attn_cost(&g1, 3, 9).unwrap().intensity() - 1.0).abs() < 1e-12);
        let one = attn_cost(&s, 5, 100).unwrap();
        let two = attn_cost(&s, 10, 100).unwrap();
        assert_eq!(two.flops, 2.0 * one.flops);
        assert_eq!(two.bytes, 2.0 * one.bytes);
    }

    #[test]
    fn roofline_examples() {
        let cat = builtin_catalog();
        let h100 = cat.device("H100").unwrap();
        let h20 = cat.device("H20").unwrap();
        let unit = EfficiencyProfile::new(1.0, 1.0).unwrap();
        let cost = OpCost {
            flops: 3.584e13,
            bytes: 0.0,
        };
        let t = roofline_time(cost, h100, 2, &unit, OpKind::Gemm).unwrap();
        assert!(rel(t.seconds, 1.812e-2) < 1e-3);
        assert_eq!(t.bound, Bound::Compute);
        let z = roofline_time(OpCost::ZERO, h100, 1, &unit, OpKind::Gemm).unwrap();
        assert_eq!(z.seconds, 0.0);

        let eff = EfficiencyProfile::new(0.55, 0.8).unwrap();
        let a = attn_cost(&llama3(), 300, 8192).unwrap();
        assert_eq!(a.bytes, kv_bytes_per_token(&llama3()) * 300.0 * 8192.0);
        assert!(rel(a.bytes, 8.053e11) < 1e-3);
        let t = roofline_time(a, h20, 4, &eff, OpKind::Attention).unwrap();
        assert!(rel(t.seconds, 6.29e-2) < 1e-3);
        assert_eq!(t.bound, Bound::Bandwidth);
        assert!(roofline_time(a, h20, 0, &eff, OpKind::Attention).is_err());
    }

    #[test]
    fn scaling_pool_divides_time() {
        let h100 = builtin_catalog().device("H100").unwrap().clone();
        let eff = EfficiencyProfile::default();
        let c = nonattn_cost(&llama3(), 100).unwrap();
        let t1 = roofline_time(c, &h100, 1, &eff, OpKind::Gemm).unwrap().seconds;
        let t4 = roofline_time(c, &h100, 4, &eff, OpKind::Gemm).unwrap().seconds;
        assert!(rel(t1 / 4.0, t4) < 1e-15);
    }

    #[test]
    fn mfu_inverts_compute_bound_roofline() {
        let h100 = builtin_catalog().device("H100").unwrap().clone();
        let eff = EfficiencyProfile::new(0.5, 0.5).unwrap();
        let cost = OpCost {
            flops: 1e15,
            bytes: 1e9,
        };
        let t = roofline_time(cost, &h100, 1, &eff, OpKind::Gemm).unwrap();
        let u = mfu(cost.flops, t.seconds, &PoolCapacity::of(&h100, 1)).unwrap();
        assert!((u - 0.5).abs() < 1e-15);
        assert!(mfu(1.0, 0.0, &PoolCapacity::of(&h100, 1)).is_err());
    }

    #[test]
    fn small_batch_mfu() {
        let h100 = builtin_catalog().device("H100").unwrap().clone();
        let pool = PoolCapacity::of(&h100, 1);
        let c = nonattn_cost(&llama3(), 64).unwrap();
        let t = roofline_time(c, &h100, 1, &EfficiencyProfile::default(), OpKind::Gemm).unwrap();
        assert_eq!(t.bound, Bound::Bandwidth);
        assert!(mfu(c.flops, t.seconds, &pool).unwrap() < 0.20);
        // an ideal device is bandwidth-bound here too, but only just above 20%
        let ideal = EfficiencyProfile::new(1.0, 1.0).unwrap();
        let t = roofline_time(c, &h100, 1, &ideal, OpKind::Gemm).unwrap();
        let u = mfu(c.flops, t.seconds, &pool).unwrap();
        let expect = (2.0 * 70e9 * 64.0 / 989e12) / (2.0 * (70e9 + 2.0 * 64.0 * 8192.0) / 3.35e12);
        assert!(rel(u, expect) < 1e-12 && u > 0.21);
    }

    #[test]
    fn kv_bytes_and_capacity() {
        let cat = builtin_catalog();
        assert_eq!(kv_bytes_per_token(&llama3()), 327_680.0);
        assert_eq!(kv_bytes_per_token(cat.model("llama-65b").unwrap()), 2_621_440.0);
        assert_eq!(max_batch(80e9, 0.0, &llama3(), 8192, 0.0).unwrap(), 29);
        assert_eq!(max_batch(320e9, 137.5e9, &llama3(), 8192, 0.0).unwrap(), 67);
        assert_eq!(max_batch(384e9, 0.0, &llama3(), 8192, 0.0).unwrap(), 143);
        assert!(matches!(
            max_batch(80e9, 137.5e9, &llama3(), 8192, 0.0),
            Err(Error::WeightsExceedMemory { .. })
        ));
        // default headroom trims the homogeneous 4xH100 figure
        assert_eq!(max_batch(320e9, 137.5e9, &llama3(), 8192, 0.05).unwrap(), 62);
    }

    #[test]
    fn comm_volume_values() {
        let s = llama3();
        assert_eq!(comm_volume(&s, 300).unwrap(), 884_736_000.0);
        assert_eq!(comm_volume(&s, 600).unwrap(), 2.0 * 884_736_000.0);
        let mut g1 = s.clone();
        g1.gqa_group = 1;
        assert_eq!(comm_volume(&g1, 1).unwrap(), 4.0 * 2.0 * 8192.0 * 80.0);
        let m = layer_messages(&s, 300);
        assert_eq!(m.total() * 80.0, 884_736_000.0);
    }

    #[test]
    fn min_bandwidth_example() {
        let s = llama3();
        let timing = TimingEstimate {
            t_model: 0.1,
            t_attn: 0.05,
            t_net: 0.0,
            model_bound: Bound::Compute,
            attn_bound: Bound::Bandwidth,
            source: TimingSource::Measured,
        };
        let bw = min_bandwidth(&s, 300, 0.2, &timing).unwrap();
        assert!((bw / 1e9 - 29.49).abs() < 0.01);
        let half = min_bandwidth(&s, 300, 0.4, &timing).unwrap();
        assert!(rel(half * 2.0, bw) < 1e-15);
        assert!(min_bandwidth(&s, 300, 0.0, &timing).is_err());
        let back = bw * 0.2 * (timing.t_model + timing.t_attn);
        assert!(rel(back, comm_volume(&s, 300).unwrap()) < 1e-12);
    }
}
