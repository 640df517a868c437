//! Event loop.
//!
//! Every decode iteration of a (sub-)batch walks the layers: a model slice on
//! a compute replica, the Q/K/V transfer, attention on the memory pool, and the
//! output transfer back. Events are ordered by `(tick, sequence)`, ticks are
//! microseconds, and fractional durations are carried per batch so rounding
//! never drifts by more than a tick.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::Serialize;

use super::ledger::KvLedger;
use super::net::{xfer_time, NetPreset};
use super::{weighted_percentile, SimMetrics, SimOptions, TbtStats};
use crate::error::{invalid, Error, Result};
use crate::model::{ClusterConfig, ClusterMode, LlmSpec, PoolCapacity, TraceRecord};
use crate::perf::{attn_cost_tokens, kv_bytes_per_token, layer_messages, nonattn_cost, roofline_on, OpKind};
use crate::pipeline::replica_for;

const TICKS_PER_S: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Msg {
    Q,
    Kv,
    Qkv,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Arrival(usize),
    SliceDone(usize),
    XferDone(usize, Msg),
    AttnDone(usize),
    IterBoundary(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Work {
    Slice,
    Attn,
}

#[derive(Debug, Clone, Copy)]
struct Task {
    batch: usize,
    work: Work,
    duration: u64,
}

#[derive(Debug, Default)]
struct Resource {
    busy: bool,
    queue: VecDeque<Task>,
    busy_ticks: u64,
}

/// Exact per-layer durations in microseconds for the current iteration.
#[derive(Debug, Clone, Copy, Default)]
struct LayerPlan {
    slice: f64,
    attn: f64,
    x_q: f64,
    x_kv: f64,
    x_qkv: f64,
    x_out: f64,
}

#[derive(Debug, Default)]
struct Batch {
    members: Vec<usize>,
    committed: u64,
    active: bool,
    layer: u64,
    slice_counter: u64,
    slice_res: usize,
    iter_start: u64,
    context_tokens: u64,
    carry: f64,
    plan: LayerPlan,
    kv_arrived: bool,
    attn_done: bool,
}

impl Batch {
    fn take(&mut self, us: f64) -> u64 {
        let t = us + self.carry;
        let whole = t.floor();
        self.carry = t - whole;
        whole as u64
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ReqState {
    generated: u64,
    rejected: bool,
}

/// One completed decode iteration of one sub-batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub batch: usize,
    pub start_us: u64,
    pub end_us: u64,
    pub size: u64,
    pub context_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub metrics: SimMetrics,
    pub iterations: Vec<IterationRecord>,
    /// Per-request generated tokens, in trace order.
    pub generated: Vec<u64>,
    /// Events at which the KV ledger invariant was checked.
    pub kv_checks: u64,
}

struct Sim<'a> {
    spec: &'a LlmSpec,
    trace: Vec<TraceRecord>,
    opts: &'a SimOptions,
    homogeneous: bool,
    n_sub: usize,
    replicas: usize,
    replica_cap: PoolCapacity,
    memory_cap: PoolCapacity,
    net: NetPreset,
    kvpt: u64,
    post_q_fraction: f64,
    horizon: Option<u64>,

    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, EventKind)>>,
    resources: Vec<Resource>,
    memory_res: usize,
    batches: Vec<Batch>,
    queue: VecDeque<usize>,
    ledger: KvLedger,
    reqs: Vec<ReqState>,

    tbt: BTreeMap<u64, u64>,
    tokens: u64,
    completed: u64,
    rejected: u64,
    running: u64,
    area: u128,
    last_change: u64,
    peak_batch: u64,
    first_arrival: Option<u64>,
    last_token: u64,
    iterations: u64,
    kv_checks: u64,
    kv_violations: u64,
    records: Vec<IterationRecord>,
}

impl<'a> Sim<'a> {
    fn push(&mut self, at: u64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, kind)));
    }

    fn context_of(&self, r: usize) -> u64 {
        self.trace[r].prompt_tokens + self.reqs[r].generated
    }

    fn final_bytes(&self, r: usize) -> u64 {
        (self.trace[r].prompt_tokens + self.trace[r].output_tokens) * self.kvpt
    }

    fn touch(&mut self) {
        self.area += self.running as u128 * (self.now - self.last_change) as u128;
        self.last_change = self.now;
    }

    fn set_running(&mut self) {
        self.touch();
        self.running = self.batches.iter().map(|b| b.members.len() as u64).sum();
        self.peak_batch = self.peak_batch.max(self.running);
    }

    fn admit(&mut self, b: usize) {
        while let Some(&r) = self.queue.front() {
            let fin = self.final_bytes(r);
            if !self.ledger.fits(fin) {
                break;
            }
            if self.n_sub > 1 {
                let share = self.ledger.capacity() / self.n_sub as u64;
                let mine = &self.batches[b];
                let min_other = self
                    .batches
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != b)
                    .map(|(_, x)| x.members.len())
                    .min()
                    .unwrap_or(0);
                if mine.committed + fin > share && mine.members.len() > min_other {
                    break;
                }
            }
            self.queue.pop_front();
            let cur = self.trace[r].prompt_tokens * self.kvpt;
            self.ledger.admit(r, cur, fin).expect("checked fit");
            let batch = &mut self.batches[b];
            batch.members.push(r);
            batch.committed += fin;
        }
    }

    fn start_iteration(&mut self, b: usize) {
        let size = self.batches[b].members.len() as u64;
        let ctx: u64 = self.batches[b].members.iter().map(|&r| self.context_of(r)).sum();
        let layers = self.spec.layers as f64;
        let eff = &self.opts.efficiency;
        let cost = nonattn_cost(self.spec, size).expect("non-empty batch");
        let slice = roofline_on(cost, &self.replica_cap, eff, OpKind::Gemm).seconds;
        let attn = roofline_on(attn_cost_tokens(self.spec, ctx), &self.memory_cap, eff, OpKind::Attention).seconds;
        let msgs = layer_messages(self.spec, size);
        let x = |bytes: f64| {
            if self.homogeneous {
                0.0
            } else {
                xfer_time(bytes, &self.net) * TICKS_PER_S
            }
        };
        let plan = LayerPlan {
            slice: slice * TICKS_PER_S / layers,
            attn: attn * TICKS_PER_S / layers,
            x_q: x(msgs.q_bytes),
            x_kv: x(msgs.kv_bytes),
            x_qkv: x(msgs.q_bytes + msgs.kv_bytes),
            x_out: x(msgs.out_bytes),
        };
        let now = self.now;
        let batch = &mut self.batches[b];
        batch.active = true;
        batch.iter_start = now;
        batch.layer = 0;
        batch.context_tokens = ctx;
        batch.plan = plan;
        self.start_layer(b);
    }

    fn start_layer(&mut self, b: usize) {
        let res = if self.homogeneous || self.n_sub < 2 {
            0
        } else {
            let k = self.batches[b].slice_counter;
            (replica_for(b as u64, k, self.n_sub as u64).expect("n >= 2") - 1) as usize
        };
        let batch = &mut self.batches[b];
        batch.slice_res = res;
        let duration = batch.take(batch.plan.slice);
        self.request(
            res,
            Task {
                batch: b,
                work: Work::Slice,
                duration,
            },
        );
    }

    fn request(&mut self, res: usize, task: Task) {
        if self.resources[res].busy {
            self.resources[res].queue.push_back(task);
        } else {
            self.start_task(res, task);
        }
    }

    fn start_task(&mut self, res: usize, task: Task) {
        let r = &mut self.resources[res];
        r.busy = true;
        r.busy_ticks += task.duration;
        let done = self.now + task.duration;
        match task.work {
            Work::Slice => {
                self.push(done, EventKind::SliceDone(task.batch));
                if self.opts.overlap && !self.homogeneous {
                    let q_ready = ((1.0 - self.post_q_fraction) * task.duration as f64).floor() as u64;
                    let batch = &mut self.batches[task.batch];
                    let x_q = batch.take(batch.plan.x_q);
                    self.push(self.now + q_ready + x_q, EventKind::XferDone(task.batch, Msg::Q));
                }
            }
            Work::Attn => self.push(done, EventKind::AttnDone(task.batch)),
        }
    }

    fn release(&mut self, res: usize) {
        self.resources[res].busy = false;
        if let Some(next) = self.resources[res].queue.pop_front() {
            self.start_task(res, next);
        }
    }

    fn request_attention(&mut self, b: usize) {
        let batch = &mut self.batches[b];
        let duration = batch.take(batch.plan.attn);
        self.request(
            self.memory_res,
            Task {
                batch: b,
                work: Work::Attn,
                duration,
            },
        );
    }

    fn finish_attention(&mut self, b: usize) {
        let batch = &mut self.batches[b];
        batch.kv_arrived = false;
        batch.attn_done = false;
        let x = batch.take(batch.plan.x_out);
        self.push(self.now + x, EventKind::XferDone(b, Msg::Out));
    }

    fn layer_done(&mut self, b: usize) {
        let batch = &mut self.batches[b];
        batch.layer += 1;
        if batch.layer == self.spec.layers {
            self.push(self.now, EventKind::IterBoundary(b));
        } else {
            self.start_layer(b);
        }
    }

    fn iteration_boundary(&mut self, b: usize) {
        let now = self.now;
        let members = std::mem::take(&mut self.batches[b].members);
        let size = members.len() as u64;
        let dur = now - self.batches[b].iter_start;
        *self.tbt.entry(dur).or_insert(0) += size;
        self.tokens += size;
        self.iterations += 1;
        self.last_token = now;
        if self.opts.record_iterations {
            self.records.push(IterationRecord {
                batch: b,
                start_us: self.batches[b].iter_start,
                end_us: now,
                size,
                context_tokens: self.batches[b].context_tokens,
            });
        }
        let mut keep = Vec::with_capacity(members.len());
        for r in members {
            self.reqs[r].generated += 1;
            self.ledger.grow(r, self.kvpt);
            if self.reqs[r].generated == self.trace[r].output_tokens {
                self.ledger.release(r);
                self.batches[b].committed -= self.final_bytes(r);
                self.completed += 1;
            } else {
                keep.push(r);
            }
        }
        self.batches[b].members = keep;
        self.admit(b);
        self.set_running();
        if self.batches[b].members.is_empty() {
            self.batches[b].active = false;
        } else {
            self.start_iteration(b);
        }
    }

    fn arrival(&mut self, r: usize) {
        self.first_arrival.get_or_insert(self.now);
        if self.final_bytes(r) > self.ledger.capacity() {
            self.reqs[r].rejected = true;
            self.rejected += 1;
            return;
        }
        self.queue.push_back(r);
        for b in 0..self.n_sub {
            if !self.batches[b].active {
                self.admit(b);
                if !self.batches[b].members.is_empty() {
                    self.set_running();
                    self.start_iteration(b);
                }
            }
        }
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Arrival(r) => self.arrival(r),
            EventKind::SliceDone(b) => {
                let res = self.batches[b].slice_res;
                self.release(res);
                self.batches[b].slice_counter += 1;
                if self.homogeneous {
                    self.request_attention(b);
                } else if self.opts.overlap {
                    let batch = &mut self.batches[b];
                    let x = batch.take(batch.plan.x_kv);
                    self.push(self.now + x, EventKind::XferDone(b, Msg::Kv));
                } else {
                    let batch = &mut self.batches[b];
                    let x = batch.take(batch.plan.x_qkv);
                    self.push(self.now + x, EventKind::XferDone(b, Msg::Qkv));
                }
            }
            EventKind::XferDone(b, Msg::Q | Msg::Qkv) => self.request_attention(b),
            EventKind::XferDone(b, Msg::Kv) => {
                self.batches[b].kv_arrived = true;
                if self.batches[b].attn_done {
                    self.finish_attention(b);
                }
            }
            EventKind::AttnDone(b) => {
                self.release(self.memory_res);
                if self.homogeneous {
                    self.layer_done(b);
                } else if self.opts.overlap {
                    self.batches[b].attn_done = true;
                    if self.batches[b].kv_arrived {
                        self.finish_attention(b);
                    }
                } else {
                    self.finish_attention(b);
                }
            }
            EventKind::XferDone(b, Msg::Out) => self.layer_done(b),
            EventKind::IterBoundary(b) => self.iteration_boundary(b),
        }
    }

    fn run(mut self, cost_per_hour: f64, notes: Vec<String>) -> SimOutcome {
        for r in 0..self.trace.len() {
            let at = (self.trace[r].arrival_s * TICKS_PER_S).round() as u64;
            self.push(at, EventKind::Arrival(r));
        }
        while let Some(Reverse((time, _, kind))) = self.heap.pop() {
            if self.horizon.is_some_and(|h| time > h) {
                break;
            }
            self.now = time;
            self.handle(kind);
            self.kv_checks += 1;
            if !self.ledger.holds() {
                self.kv_violations += 1;
            }
            debug_assert!(self.ledger.holds(), "KV ledger over capacity at t={time}");
        }
        self.now = self.last_token.max(self.last_change);
        self.touch();

        let wall_ticks = self.last_token;
        let wall_time = wall_ticks as f64 / TICKS_PER_S;
        let throughput = if wall_ticks > 0 {
            self.tokens as f64 / wall_time
        } else {
            0.0
        };
        let tbt_pairs: Vec<(u64, u64)> = self.tbt.iter().map(|(&d, &c)| (d, c)).collect();
        let samples: u64 = tbt_pairs.iter().map(|&(_, c)| c).sum();
        let tbt = if samples == 0 {
            TbtStats::default()
        } else {
            let sum: u128 = tbt_pairs.iter().map(|&(d, c)| d as u128 * c as u128).sum();
            TbtStats {
                mean: sum as f64 / samples as f64 / TICKS_PER_S,
                p50: weighted_percentile(&tbt_pairs, samples, 0.50) as f64 / TICKS_PER_S,
                p99: weighted_percentile(&tbt_pairs, samples, 0.99) as f64 / TICKS_PER_S,
            }
        };
        let span = wall_ticks.saturating_sub(self.first_arrival.unwrap_or(0));
        let avg_batch = if span > 0 {
            self.area as f64 / span as f64
        } else {
            0.0
        };
        let mut util = BTreeMap::new();
        if wall_ticks > 0 {
            let w = wall_ticks as f64;
            let compute: u64 = self.resources[..self.replicas].iter().map(|r| r.busy_ticks).sum();
            util.insert("compute".to_string(), compute as f64 / (w * self.replicas as f64));
            if !self.homogeneous {
                util.insert("memory".to_string(), self.resources[self.memory_res].busy_ticks as f64 / w);
            }
        }
        let tokens_per_dollar = throughput * 3600.0 / cost_per_hour;
        let generated: Vec<u64> = self.reqs.iter().map(|r| r.generated).collect();
        let metrics = SimMetrics {
            tokens_generated: self.tokens,
            wall_time,
            throughput,
            tbt,
            avg_batch,
            peak_batch: self.peak_batch,
            util,
            cost_per_hour,
            tokens_per_dollar,
            requests_completed: self.completed,
            requests_rejected: self.rejected,
            requests_pending: self.trace.len() as u64 - self.completed - self.rejected,
            iterations: self.iterations,
            kv_capacity_bytes: self.ledger.capacity(),
            kv_peak_bytes: self.ledger.peak(),
            kv_violations: self.kv_violations,
            overlap: self.opts.overlap && !self.homogeneous,
            n_batches: self.n_sub as u64,
            seed: self.opts.seed,
            notes,
        };
        SimOutcome {
            metrics,
            iterations: self.records,
            generated,
            kv_checks: self.kv_checks,
        }
    }
}

/// Simulate `trace` on `cluster`, in whichever mode the cluster declares.
pub fn simulate(
    model: &LlmSpec,
    cluster: &ClusterConfig,
    trace: &[TraceRecord],
    opts: &SimOptions,
) -> Result<SimOutcome> {
    cluster.validate()?;
    model.validate()?;
    for r in trace {
        r.validate()?;
    }
    if !(0.0..1.0).contains(&opts.headroom) {
        return Err(invalid("sim options", format!("headroom {} not in [0, 1)", opts.headroom)));
    }
    let homogeneous = cluster.mode == ClusterMode::HomogeneousTp;
    let mut notes = Vec::new();
    if model.num_heads_assumed {
        notes.push(format!("num_heads assumed = hidden_dim/128 = {}", model.num_heads));
    }

    let compute = cluster.compute_capacity();
    let (n_sub, replicas, replica_cap, memory_cap, kv_capacity) = if homogeneous {
        if opts.n_batches > 1 {
            notes.push("n_batches ignored in homogeneous mode".into());
        }
        let usable = compute.mem_bytes * (1.0 - opts.headroom) - model.weight_bytes;
        if usable < 0.0 {
            return Err(Error::WeightsExceedMemory {
                weights: model.weight_bytes,
                memory: compute.mem_bytes,
            });
        }
        notes.push("homogeneous KV capacity uses raw bytes (no paged-KV overhead)".into());
        (1, 1, compute, compute, usable.floor() as u64)
    } else {
        let n = opts.n_batches.max(1);
        let replicas = if n >= 2 { n - 1 } else { 1 };
        if !compute.count.is_multiple_of(replicas) {
            return Err(invalid(
                "sim options",
                format!("{} compute devices cannot form {replicas} equal replicas", compute.count),
            ));
        }
        let replica_cap = compute.split(replicas);
        if model.weight_bytes > replica_cap.mem_bytes {
            return Err(Error::WeightsExceedMemory {
                weights: model.weight_bytes,
                memory: replica_cap.mem_bytes,
            });
        }
        let memory = cluster.memory_capacity();
        let cap = (memory.mem_bytes * (1.0 - opts.headroom)).floor() as u64;
        if opts.overlap {
            notes.push("overlap timing is a mechanistic approximation".into());
        }
        (n as usize, replicas as usize, replica_cap, memory, cap)
    };
    let net = match (&opts.network, homogeneous) {
        (_, true) => NetPreset::ideal(),
        (Some(p), false) => p.clone(),
        (None, false) => NetPreset::by_name(&cluster.network)?,
    };

    let mut trace: Vec<TraceRecord> = trace.to_vec();
    trace.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.request_id.cmp(&b.request_id)));
    let n_req = trace.len();
    let kvpt = kv_bytes_per_token(model) as u64;
    let kv_proj = 2.0 * model.hidden_dim as f64 * (model.hidden_dim / model.gqa_group) as f64;
    let post_q_fraction = (kv_proj / model.params_per_layer()).clamp(0.0, 1.0);
    let n_resources = if homogeneous { 1 } else { replicas + 1 };

    let sim = Sim {
        spec: model,
        trace,
        opts,
        homogeneous,
        n_sub,
        replicas,
        replica_cap,
        memory_cap,
        net,
        kvpt,
        post_q_fraction,
        horizon: opts.horizon_s.map(|h| (h * TICKS_PER_S).round() as u64),
        now: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        resources: (0..n_resources).map(|_| Resource::default()).collect(),
        memory_res: if homogeneous { 0 } else { replicas },
        batches: (0..n_sub).map(|_| Batch::default()).collect(),
        queue: VecDeque::new(),
        ledger: KvLedger::new(kv_capacity, n_req),
        reqs: vec![ReqState::default(); n_req],
        tbt: BTreeMap::new(),
        tokens: 0,
        completed: 0,
        rejected: 0,
        running: 0,
        area: 0,
        last_change: 0,
        peak_batch: 0,
        first_arrival: None,
        last_token: 0,
        iterations: 0,
        kv_checks: 0,
        kv_violations: 0,
        records: Vec::new(),
    };
    Ok(sim.run(cluster.cost_per_hour(), notes))
}

/// Disaggregated run: non-attention on the compute pool, attention on the memory pool.
pub fn run_disaggregated(
    model: &LlmSpec,
    cluster: &ClusterConfig,
    trace: &[TraceRecord],
    opts: &SimOptions,
) -> Result<SimMetrics> {
    if cluster.mode != ClusterMode::Disaggregated {
        return Err(Error::Precondition("cluster is not in disaggregated mode".into()));
    }
    if trace.is_empty() {
        return Err(Error::Precondition("empty trace".into()));
    }
    Ok(simulate(model, cluster, trace, opts)?.metrics)
}

/// Tensor-parallel baseline: both operator classes share one pool.
pub fn run_homogeneous(
    model: &LlmSpec,
    cluster: &ClusterConfig,
    trace: &[TraceRecord],
    opts: &SimOptions,
) -> Result<SimMetrics> {
    if cluster.mode != ClusterMode::HomogeneousTp {
        return Err(Error::Precondition("cluster is not in homogeneous mode".into()));
    }
    Ok(simulate(model, cluster, trace, opts)?.metrics)
}
