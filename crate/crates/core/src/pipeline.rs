//! Rotational staggered pipelining.
//!
//! `n` batches share `n - 1` model replicas and one memory-device pool. Time is
//! divided into slots of `t_m / (n - 1)`; at every slot exactly one model slice
//! starts (on replica `(j + k) mod (n - 1) + 1` for slice `k` of batch `j`) and
//! the pool runs exactly one attention operator. When `t_a` matches the slot
//! length every device is busy in steady state.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative mismatch between `t_a` and `t_m / (n - 1)` treated as equal.
pub const DEFAULT_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_batches: u64,
    /// Time of one model slice, in microsecond ticks.
    pub t_model_us: u64,
    /// Time of one attention operator, in microsecond ticks.
    pub t_attn_us: u64,
    /// Slices per full model pass.
    pub n_slices: u64,
    pub tolerance: f64,
    pub allow_stretch: bool,
}

impl PipelineConfig {
    pub fn new(n_batches: u64, t_model_s: f64, t_attn_s: f64, n_slices: u64) -> Result<Self> {
        let to_us = |s: f64| (s * 1e6).round();
        let cfg = PipelineConfig {
            n_batches,
            t_model_us: to_us(t_model_s) as u64,
            t_attn_us: to_us(t_attn_s) as u64,
            n_slices,
            tolerance: DEFAULT_TOLERANCE,
            allow_stretch: true,
        };
        if !(t_model_s > 0.0 && t_attn_s > 0.0) {
            return Err(invalid("pipeline config", "times must be > 0"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_batches < 2 {
            return Err(invalid("pipeline config", format!("n must be >= 2, got {}", self.n_batches)));
        }
        if self.t_model_us == 0 || self.t_attn_us == 0 {
            return Err(invalid("pipeline config", "times must be at least 1us"));
        }
        if self.n_slices == 0 {
            return Err(invalid("pipeline config", "n_slices must be >= 1"));
        }
        Ok(())
    }

    /// `t_m / (n - 1)` in ticks (fractional).
    pub fn target_attn_us(&self) -> f64 {
        self.t_model_us as f64 / (self.n_batches - 1) as f64
    }

    /// Whether `t_a` is within tolerance of `t_m / (n - 1)`.
    pub fn is_feasible(&self) -> bool {
        let target = self.target_attn_us();
        (self.t_attn_us as f64 - target).abs() / target <= self.tolerance
    }

    pub fn replicas(&self) -> u64 {
        self.n_batches - 1
    }
}

/// Replica (1-based) running slice `slice` of batch `batch` when `n` batches
/// are in flight.
pub fn replica_for(batch: u64, slice: u64, n: u64) -> Result<u64> {
    if n < 2 {
        return Err(Error::Precondition(format!("n must be >= 2, got {n}")));
    }
    Ok((batch + slice) % (n - 1) + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Replica(u64),
    MemoryPool,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Replica(r) => write!(f, "replica{r}"),
            Resource::MemoryPool => write!(f, "memory"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    ModelSlice,
    Attention,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::ModelSlice => "model-slice",
            TaskKind::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimelineEntry {
    pub resource: Resource,
    pub batch: u64,
    pub kind: TaskKind,
    /// Per-batch slice counter; the attention entry shares its slice's index.
    pub slice: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub entries: Vec<TimelineEntry>,
    pub horizon: u64,
    /// Tick after which idle gaps count as bubbles.
    pub steady_start: u64,
    /// Slot length as the fraction `slot_num / slot_den` ticks.
    pub slot_num: u64,
    pub slot_den: u64,
    pub stretched: bool,
    pub replica_idle_fraction: f64,
    pub pool_idle_fraction: f64,
}

impl Timeline {
    /// Start tick of slot `s`; fractional slot lengths are spread so that no
    /// boundary is off by more than one tick.
    pub fn slot_start(&self, s: u64) -> u64 {
        slot_boundary(s, self.slot_num, self.slot_den)
    }

    /// Timeline as `resource,batch,kind,start_us,end_us` CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["resource", "batch", "kind", "start_us", "end_us"])?;
        for e in &self.entries {
            out.write_record([
                e.resource.to_string(),
                e.batch.to_string(),
                e.kind.to_string(),
                e.start.to_string(),
                e.end.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn slot_boundary(s: u64, num: u64, den: u64) -> u64 {
    (s as u128 * num as u128 / den as u128) as u64
}

/// Steady-state schedule covering `horizon_slots` slots.
pub fn build_schedule(cfg: &PipelineConfig, horizon_slots: u64) -> Result<Timeline> {
    cfg.validate()?;
    let n = cfg.n_batches;
    let replicas = cfg.replicas();
    let feasible = cfg.is_feasible();
    if !feasible && !cfg.allow_stretch {
        return Err(Error::InfeasibleSchedule {
            t_attn_us: cfg.t_attn_us,
            target_us: cfg.target_attn_us(),
        });
    }
    let attn_longer = cfg.t_attn_us as f64 > cfg.target_attn_us();
    let (slot_num, slot_den) = if !feasible && attn_longer {
        (cfg.t_attn_us, 1)
    } else {
        (cfg.t_model_us, replicas)
    };
    let slot = slot_num as f64 / slot_den as f64;
    let horizon = slot_boundary(horizon_slots, slot_num, slot_den);

    let mut entries = Vec::new();
    for batch in 0..n {
        for k in 0.. {
            let s = batch + k * n;
            let start = slot_boundary(s, slot_num, slot_den);
            if start >= horizon {
                break;
            }
            let slice_end = start + cfg.t_model_us;
            if slice_end > horizon {
                break;
            }
            entries.push(TimelineEntry {
                resource: Resource::Replica(replica_for(batch, k, n)?),
                batch,
                kind: TaskKind::ModelSlice,
                slice: k,
                start,
                end: slice_end,
            });
            let a_start = slot_boundary(s + replicas, slot_num, slot_den);
            let a_end = if feasible {
                slot_boundary(s + replicas + 1, slot_num, slot_den)
            } else {
                a_start + cfg.t_attn_us
            };
            if a_end > horizon {
                break;
            }
            entries.push(TimelineEntry {
                resource: Resource::MemoryPool,
                batch,
                kind: TaskKind::Attention,
                slice: k,
                start: a_start,
                end: a_end,
            });
        }
    }
    entries.sort_by_key(|e| (e.start, e.resource, e.batch));

    let (replica_idle, pool_idle) = if feasible {
        (0.0, 0.0)
    } else {
        (
            (1.0 - cfg.t_model_us as f64 / (replicas as f64 * slot)).max(0.0),
            (1.0 - cfg.t_attn_us as f64 / slot).max(0.0),
        )
    };
    Ok(Timeline {
        entries,
        horizon,
        steady_start: slot_boundary(n, slot_num, slot_den),
        slot_num,
        slot_den,
        stretched: !feasible,
        replica_idle_fraction: replica_idle,
        pool_idle_fraction: pool_idle,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bubble {
    pub resource: String,
    pub start: u64,
    pub gap: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub conflicts: usize,
    pub bubbles: Vec<Bubble>,
    pub migrations: usize,
}

/// Count overlaps, steady-state idle gaps and cross-replica slice moves.
pub fn validate(timeline: &Timeline) -> ValidationReport {
    let mut by_resource: std::collections::BTreeMap<Resource, Vec<&TimelineEntry>> = Default::default();
    for e in &timeline.entries {
        by_resource.entry(e.resource).or_default().push(e);
    }
    let mut conflicts = 0;
    let mut bubbles = Vec::new();
    for (res, mut list) in by_resource {
        list.sort_by_key(|e| (e.start, e.end));
        let mut busy_until = list[0].end;
        for e in &list[1..] {
            if e.start < busy_until {
                conflicts += 1;
            } else if e.start > busy_until && busy_until >= timeline.steady_start {
                bubbles.push(Bubble {
                    resource: res.to_string(),
                    start: busy_until,
                    gap: e.start - busy_until,
                });
            }
            busy_until = busy_until.max(e.end);
        }
    }

    let mut slices: Vec<&TimelineEntry> = timeline
        .entries
        .iter()
        .filter(|e| e.kind == TaskKind::ModelSlice)
        .collect();
    slices.sort_by_key(|e| (e.batch, e.slice));
    let migrations = slices
        .windows(2)
        .filter(|w| w[0].batch == w[1].batch && w[0].resource != w[1].resource)
        .count();
    ValidationReport {
        conflicts,
        bubbles,
        migrations,
    }
}

/// Steady-state model slices completed per second: `(n - 1) / t_m` when feasible.
pub fn steady_slice_rate(timeline: &Timeline) -> f64 {
    timeline.slot_den as f64 / timeline.slot_num as f64 * 1e6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replica_formula() {
        assert_eq!(replica_for(0, 0, 3).unwrap(), 1);
        assert_eq!(replica_for(1, 3, 3).unwrap(), 1);
        for j in 0..5 {
            for k in 0..5 {
                assert_eq!(replica_for(j, k, 2).unwrap(), 1);
            }
        }
        assert!(replica_for(0, 0, 1).is_err());
    }

    #[test]
    fn two_batch_ping_pong() {
        let cfg = PipelineConfig::new(2, 0.1, 0.1, 80).unwrap();
        let tl = build_schedule(&cfg, 20).unwrap();
        let report = validate(&tl);
        assert_eq!(report.conflicts, 0);
        assert!(report.bubbles.is_empty());
        assert_eq!(report.migrations, 0);
        let replica: Vec<u64> = tl
            .entries
            .iter()
            .filter(|e| e.resource == Resource::Replica(1))
            .map(|e| e.batch)
            .collect();
        assert!(replica.windows(2).all(|w| w[0] != w[1]));
        let busy: u64 = tl
            .entries
            .iter()
            .filter(|e| e.resource == Resource::MemoryPool)
            .map(|e| e.end - e.start)
            .sum();
        // the pool starts one slot late; every later slot is busy
        assert_eq!(busy, tl.horizon - 100_000);
    }

    #[test]
    fn stretched_schedule_reports_idle_pool() {
        let cfg = PipelineConfig::new(3, 0.090, 0.040, 80).unwrap();
        assert!(!cfg.is_feasible());
        let tl = build_schedule(&cfg, 100).unwrap();
        assert!(tl.stretched);
        assert!((tl.pool_idle_fraction - 5.0 / 45.0).abs() < 1e-12);
        assert_eq!(tl.replica_idle_fraction, 0.0);
        let report = validate(&tl);
        assert_eq!(report.conflicts, 0);
        assert!(report.bubbles.iter().all(|b| b.resource == "memory" && b.gap == 5_000));

        let strict = PipelineConfig {
            allow_stretch: false,
            ..cfg
        };
        assert!(matches!(build_schedule(&strict, 10), Err(Error::InfeasibleSchedule { .. })));
    }

    #[test]
    fn slow_attention_stretches_slot() {
        let cfg = PipelineConfig::new(3, 0.090, 0.060, 80).unwrap();
        let tl = build_schedule(&cfg, 60).unwrap();
        assert_eq!((tl.slot_num, tl.slot_den), (60_000, 1));
        assert!((tl.replica_idle_fraction - 0.25).abs() < 1e-12);
        assert_eq!(validate(&tl).conflicts, 0);
    }

    #[test]
    fn overlap_is_detected() {
        let cfg = PipelineConfig::new(4, 0.09, 0.03, 80).unwrap();
        let mut tl = build_schedule(&cfg, 50).unwrap();
        let mut dup = tl.entries[5];
        dup.start += 1;
        dup.end += 1;
        tl.entries.push(dup);
        assert!(validate(&tl).conflicts >= 1);
    }

    #[test]
    fn fractional_slots_stay_within_a_tick() {
        let cfg = PipelineConfig::new(4, 0.1, 0.1 / 3.0, 80).unwrap();
        let tl = build_schedule(&cfg, 300).unwrap();
        for s in 0..300 {
            let len = tl.slot_start(s + 1) - tl.slot_start(s);
            assert!(len == 33_333 || len == 33_334);
        }
        let r = validate(&tl);
        assert_eq!(r.conflicts, 0);
        assert!(r.bubbles.is_empty());
    }

    #[test]
    fn csv_header() {
        let cfg = PipelineConfig::new(2, 0.001, 0.001, 1).unwrap();
        let tl = build_schedule(&cfg, 4).unwrap();
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("resource,batch,kind,start_us,end_us\n"));
        assert!(text.contains("replica1,0,model-slice,0,1000"));
    }
}
