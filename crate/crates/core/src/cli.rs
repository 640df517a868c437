//! Command-line front end.
//!
//! Human-readable summaries go to stdout; machine output (JSON for single
//! results, CSV for sweeps and timelines) goes to `--out`. Relative output
//! paths are resolved against `HETERO_DECODE_OUT_DIR` when it is set.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::attention::{
    cast_instance, exact_attention, head_partition, max_rel_error, partitioned_attention, random_instance,
    random_multi_head,
};
use crate::error::{invalid, Error, Result};
use crate::graph::{load_graph, slice_model, CompGraph, ScheduleItem, LLAMA_BLOCK_JSON, TWO_LAYER_JSON};
use crate::model::{builtin_catalog, load_llm_spec, Catalog, ClusterConfig, LlmSpec, PoolCapacity, TraceRecord};
use crate::perf::{
    attn_cost, comm_volume, estimate_timing, kv_bytes_per_token, max_batch, mbu, mfu, min_bandwidth, nonattn_cost,
    roofline_on, EfficiencyProfile, OpKind,
};
use crate::pipeline::{build_schedule, validate, PipelineConfig};
use crate::planner::{enumerate_dops, equal_cost_pairs, plan, write_plan_csv, DopLimits, PlanOptions};
use crate::sim::{gen_trace, read_trace_csv, simulate, write_trace_csv, NetPreset, SimOptions, TraceProfile};

pub const ENV_OUT_DIR: &str = "HETERO_DECODE_OUT_DIR";
pub const ENV_CATALOG: &str = "HETERO_DECODE_CATALOG";

#[derive(Debug, Parser)]
#[command(name = "hetero-decode", version, about = "Plan and simulate disaggregated LLM decoding")]
pub struct Cli {
    /// Device/model catalog JSON merged over the built-in entries
    #[arg(long, global = true, env = ENV_CATALOG)]
    pub catalog: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roofline time of one operator class
    Roofline(RooflineArgs),
    /// Interconnect bandwidth needed to keep network time within a fraction of compute
    MinBandwidth(MinBandwidthArgs),
    /// How many requests of a given context fit in device memory
    KvCapacity(KvCapacityArgs),
    /// Check partitioned attention against the exact computation
    AttentionCheck(AttentionCheckArgs),
    /// Slice a computation graph at its attention operators
    Split(SplitArgs),
    /// Build and validate a rotational staggered pipeline timeline
    Pipeline(PipelineArgs),
    /// Run the discrete-event simulator on a trace
    Simulate(SimulateArgs),
    /// Search device configurations for the best tokens per dollar
    Optimize(OptimizeArgs),
    /// Generate a synthetic length-only trace
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpArg {
    Nonattn,
    Attn,
}

#[derive(Debug, Args)]
pub struct EffArgs {
    /// Achievable fraction of peak flops for GEMMs
    #[arg(long, default_value_t = 0.55)]
    pub gemm_eff: f64,
    /// Achievable fraction of peak bandwidth for attention
    #[arg(long, default_value_t = 0.80)]
    pub attn_mbu: f64,
}

impl EffArgs {
    fn profile(&self) -> Result<EfficiencyProfile> {
        EfficiencyProfile::new(self.gemm_eff, self.attn_mbu)
    }
}

#[derive(Debug, Args)]
pub struct RooflineArgs {
    /// Catalog name or JSON path
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value = "H100")]
    pub device: String,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long, value_enum, default_value_t = OpArg::Nonattn)]
    pub op: OpArg,
    #[arg(long)]
    pub batch: u64,
    /// Context length, attention only
    #[arg(long, default_value_t = 1)]
    pub seq: u64,
    #[command(flatten)]
    pub eff: EffArgs,
    /// Batch sizes for a sweep written to --plot
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<u64>,
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MinBandwidthArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub batch: u64,
    #[arg(long)]
    pub seq: u64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    /// `a,b` device counts; repeat for several
    #[arg(long, required = true)]
    pub dop: Vec<String>,
    #[arg(long, default_value = "H100")]
    pub compute: String,
    #[arg(long, default_value = "H20")]
    pub memory: String,
    #[command(flatten)]
    pub eff: EffArgs,
    /// Batch sizes for a sweep written to --plot
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<u64>,
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KvCapacityArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub device: String,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long)]
    pub seq: u64,
    /// Fraction of memory held back
    #[arg(long, default_value_t = 0.0)]
    pub headroom: f64,
    /// Subtract the model weights (co-located serving)
    #[arg(long)]
    pub with_weights: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttentionCheckArgs {
    #[arg(long, default_value_t = 64)]
    pub d_head: usize,
    /// KV heads
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Query heads per KV head
    #[arg(long, default_value_t = 1)]
    pub group: usize,
    #[arg(long, default_value_t = 256)]
    pub length: usize,
    #[arg(long, default_value_t = 4)]
    pub splits: usize,
    /// Devices for the head-partition check
    #[arg(long, default_value_t = 2)]
    pub devices: usize,
    #[arg(long, default_value_t = 80.0)]
    pub max_logit: f64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run the partials in f32
    #[arg(long)]
    pub f32: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Graph JSON path, or `llama-block` / `two-layer`
    #[arg(long)]
    pub graph: String,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Concurrent batches
    #[arg(long)]
    pub n: u64,
    /// Model slice time, ms
    #[arg(long)]
    pub tm_ms: f64,
    /// Attention time, ms
    #[arg(long)]
    pub ta_ms: f64,
    #[arg(long, default_value_t = 1000)]
    pub slots: u64,
    #[arg(long, default_value_t = 80)]
    pub slices: u64,
    /// Fail instead of stretching the slot when t_a does not match t_m/(n-1)
    #[arg(long)]
    pub no_stretch: bool,
    /// Timeline CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validation report JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceSource {
    /// Trace CSV
    #[arg(long, conflicts_with = "profile")]
    pub trace: Option<PathBuf>,
    /// Synthetic profile: azure-conv, azure-code, kimi-conv, kimi-ta
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long, requires = "profile")]
    pub requests: Option<u64>,
    /// Arrivals per second for --profile
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
}

impl TraceSource {
    fn load(&self, seed: u64) -> Result<Vec<TraceRecord>> {
        match (&self.trace, &self.profile) {
            (Some(p), _) => read_trace_csv(File::open(p)?),
            (None, Some(name)) => {
                let mut prof = TraceProfile::named(name, self.rate, seed)?;
                if let Some(n) = self.requests {
                    prof.n_requests = n;
                }
                gen_trace(&prof)
            }
            (None, None) => Err(Error::Precondition("one of --trace or --profile is required".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimFlags {
    #[arg(long)]
    pub overlap: bool,
    #[arg(long, default_value_t = 1)]
    pub n_batches: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::sim::DEFAULT_HEADROOM)]
    pub headroom: f64,
    /// Override the cluster's network preset: fhbn, nccl, ideal
    #[arg(long)]
    pub network: Option<String>,
    /// Stop after this much simulated time, seconds
    #[arg(long)]
    pub horizon_s: Option<f64>,
    #[command(flatten)]
    pub eff: EffArgs,
}

impl SimFlags {
    fn options(&self) -> Result<SimOptions> {
        Ok(SimOptions {
            overlap: self.overlap,
            n_batches: self.n_batches,
            seed: self.seed,
            efficiency: self.eff.profile()?,
            headroom: self.headroom,
            network: self.network.as_deref().map(NetPreset::by_name).transpose()?,
            horizon_s: self.horizon_s,
            record_iterations: false,
        })
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: String,
    /// Cluster config JSON
    #[arg(long)]
    pub cluster: PathBuf,
    #[command(flatten)]
    pub source: TraceSource,
    #[command(flatten)]
    pub sim: SimFlags,
    /// Per-iteration CSV
    #[arg(long)]
    pub iterations: Option<PathBuf>,
    /// Metrics JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub model: String,
    /// Catalog JSON to draw devices from (defaults to the built-in catalog)
    #[arg(long)]
    pub devices: Option<PathBuf>,
    #[arg(long, default_value = "H100")]
    pub compute: String,
    #[arg(long, default_value = "H20")]
    pub memory: String,
    #[arg(long, default_value = "fhbn")]
    pub net: String,
    #[arg(long, default_value_t = 4)]
    pub a_max: u64,
    #[arg(long, default_value_t = 8)]
    pub b_max: u64,
    /// Relative cost difference still counted as equal cost
    #[arg(long, default_value_t = 0.10)]
    pub tolerance: f64,
    #[command(flatten)]
    pub source: TraceSource,
    #[command(flatten)]
    pub sim: SimFlags,
    /// Tokens-per-dollar plot data
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Ranked plan CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, default_value = "azure-conv")]
    pub profile: String,
    /// Defaults to the profile's request count
    #[arg(long)]
    pub requests: Option<u64>,
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lognormal shape of the lengths
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `argv`, run, and return the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let catalog = match &cli.catalog {
        Some(p) => Catalog::from_path(p)?,
        None => builtin_catalog(),
    };
    match &cli.command {
        Command::Roofline(a) => roofline_cmd(&catalog, a),
        Command::MinBandwidth(a) => min_bandwidth_cmd(&catalog, a),
        Command::KvCapacity(a) => kv_capacity_cmd(&catalog, a),
        Command::AttentionCheck(a) => attention_check_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::Simulate(a) => simulate_cmd(&catalog, a),
        Command::Optimize(a) => optimize_cmd(&catalog, a),
        Command::GenTrace(a) => gen_trace_cmd(a),
    }
}

fn resolve_model(catalog: &Catalog, name: &str) -> Result<LlmSpec> {
    let p = Path::new(name);
    if p.is_file() {
        return load_llm_spec(&std::fs::read_to_string(p)?);
    }
    catalog.model(name).cloned()
}

/// Output location, honouring the output-directory override for relative paths.
pub fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(ENV_OUT_DIR) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    let p = out_path(p);
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(p)?))
}

fn write_json<T: Serialize>(path: Option<&PathBuf>, value: &T) -> Result<()> {
    if let Some(p) = path {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(())
}

/// One point of plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub x: String,
    pub series: String,
    pub value: f64,
}

/// Tidy CSV: one `x,series,value` row per point, `x` named by `x_name`.
pub fn emit_plot_data(path: &Path, x_name: &str, rows: &[PlotRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Precondition("no plot data".into()));
    }
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record([x_name, "series", "value"])?;
    for r in rows {
        out.write_record([r.x.as_str(), r.series.as_str(), &format!("{}", r.value)])?;
    }
    out.flush()?;
    Ok(())
}

fn parse_dop(s: &str) -> Result<(u64, u64)> {
    let bad = || invalid("dop", format!("expected `a,b`, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn roofline_cmd(catalog: &Catalog, a: &RooflineArgs) -> Result<()> {
    let model = resolve_model(catalog, &a.model)?;
    let dev = catalog.device(&a.device)?;
    if a.count < 1 {
        return Err(invalid("device count", "must be >= 1"));
    }
    let pool = PoolCapacity::of(dev, a.count);
    let eff = a.eff.profile()?;
    let eval = |batch: u64| -> Result<serde_json::Value> {
        let (cost, kind) = match a.op {
            OpArg::Nonattn => (nonattn_cost(&model, batch)?, OpKind::Gemm),
            OpArg::Attn => (attn_cost(&model, batch, a.seq)?, OpKind::Attention),
        };
        let t = roofline_on(cost, &pool, &eff, kind);
        Ok(json!({
            "batch": batch,
            "flops": cost.flops,
            "bytes": cost.bytes,
            "intensity": cost.intensity(),
            "seconds": t.seconds,
            "bound": t.bound,
            "mfu": mfu(cost.flops, t.seconds, &pool)?,
            "mbu": mbu(cost.bytes, t.seconds, &pool)?,
        }))
    };
    let r = eval(a.batch)?;
    println!(
        "{} {:?} B={} on {}x{}: {:.3} ms ({}), MFU {:.3}, MBU {:.3}",
        model.name,
        a.op,
        a.batch,
        a.count,
        dev.name,
        r["seconds"].as_f64().unwrap_or(0.0) * 1e3,
        r["bound"].as_str().unwrap_or("?"),
        r["mfu"].as_f64().unwrap_or(0.0),
        r["mbu"].as_f64().unwrap_or(0.0),
    );
    write_json(a.out.as_ref(), &r)?;
    if let Some(plot) = &a.plot {
        let mut rows = Vec::new();
        for &b in &a.sweep {
            let v = eval(b)?;
            for series in ["mfu", "mbu"] {
                rows.push(PlotRow {
                    x: b.to_string(),
                    series: series.into(),
                    value: v[series].as_f64().unwrap_or(f64::NAN),
                });
            }
        }
        emit_plot_data(plot, "batch", &rows)?;
    }
    Ok(())
}

fn min_bandwidth_cmd(catalog: &Catalog, a: &MinBandwidthArgs) -> Result<()> {
    let model = resolve_model(catalog, &a.model)?;
    let compute = catalog.device(&a.compute)?;
    let memory = catalog.device(&a.memory)?;
    let eff = a.eff.profile()?;
    let dops = a.dop.iter().map(|s| parse_dop(s)).collect::<Result<Vec<_>>>()?;
    let eval = |batch: u64, (ca, mb): (u64, u64)| -> Result<serde_json::Value> {
        if ca < 1 || mb < 1 {
            return Err(invalid("dop", "a and b must be >= 1"));
        }
        let timing = estimate_timing(
            &model,
            batch,
            a.seq,
            &PoolCapacity::of(compute, ca),
            &PoolCapacity::of(memory, mb),
            &eff,
        )?;
        let bw = min_bandwidth(&model, batch, a.alpha, &timing)?;
        Ok(json!({
            "dop": [ca, mb],
            "batch": batch,
            "seq": a.seq,
            "alpha": a.alpha,
            "bytes_per_iter": comm_volume(&model, batch)? as u64,
            "t_model_s": timing.t_model,
            "t_attn_s": timing.t_attn,
            "min_bw_gbps": bw / 1e9,
        }))
    };
    let results = dops.iter().map(|&d| eval(a.batch, d)).collect::<Result<Vec<_>>>()?;
    for r in &results {
        println!(
            "DOP {}: {} B/iter, min bandwidth {:.2} GB/s",
            r["dop"],
            r["bytes_per_iter"],
            r["min_bw_gbps"].as_f64().unwrap_or(0.0)
        );
    }
    match results.as_slice() {
        [one] => write_json(a.out.as_ref(), one)?,
        many => write_json(a.out.as_ref(), &many)?,
    }
    if let Some(plot) = &a.plot {
        let mut rows = Vec::new();
        for &d in &dops {
            for &b in &a.sweep {
                rows.push(PlotRow {
                    x: b.to_string(),
                    series: format!("dop-{}-{}", d.0, d.1),
                    value: eval(b, d)?["min_bw_gbps"].as_f64().unwrap_or(f64::NAN),
                });
            }
        }
        emit_plot_data(plot, "batch", &rows)?;
    }
    Ok(())
}

fn kv_capacity_cmd(catalog: &Catalog, a: &KvCapacityArgs) -> Result<()> {
    let model = resolve_model(catalog, &a.model)?;
    let dev = catalog.device(&a.device)?;
    let mem = dev.mem_bytes * a.count as f64;
    let weights = if a.with_weights { model.weight_bytes } else { 0.0 };
    let n = max_batch(mem, weights, &model, a.seq, a.headroom)?;
    println!("{n} requests of {} tokens fit on {}x{}", a.seq, a.count, dev.name);
    write_json(
        a.out.as_ref(),
        &json!({
            "model": model.name,
            "device": dev.name,
            "count": a.count,
            "seq": a.seq,
            "headroom": a.headroom,
            "with_weights": a.with_weights,
            "kv_bytes_per_token": kv_bytes_per_token(&model) as u64,
            "max_batch": n,
        }),
    )
}

fn attention_check_cmd(a: &AttentionCheckArgs) -> Result<()> {
    if a.d_head == 0 || a.length == 0 || a.splits == 0 || a.heads == 0 || a.group == 0 {
        return Err(invalid("attention check", "sizes must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..a.trials {
        let inst = random_instance(&mut rng, a.d_head, a.length, a.max_logit);
        let exact = exact_attention(&inst)?;
        let err = if a.f32 {
            let got: Vec<f64> = partitioned_attention(&cast_instance::<f32>(&inst), a.splits)?
                .into_iter()
                .map(f64::from)
                .collect();
            max_rel_error(&got, &exact)
        } else {
            max_rel_error(&partitioned_attention(&inst, a.splits)?, &exact)
        };
        worst = worst.max(err);
    }
    let mh = random_multi_head(&mut rng, a.heads, a.group, a.d_head, a.length);
    let whole = mh.attend_all()?;
    let mut joined = Vec::with_capacity(whole.len());
    for r in head_partition(a.heads, a.devices)? {
        joined.extend(mh.attend_kv_heads(r)?);
    }
    let head_exact = joined == whole;
    println!(
        "{} trials, {} splits: max relative error {:.3e}; head partition over {} devices exact: {}",
        a.trials, a.splits, worst, a.devices, head_exact
    );
    write_json(
        a.out.as_ref(),
        &json!({
            "trials": a.trials,
            "d_head": a.d_head,
            "length": a.length,
            "splits": a.splits,
            "max_logit": a.max_logit,
            "precision": if a.f32 { "f32" } else { "f64" },
            "max_rel_error": worst,
            "head_partition_exact": head_exact,
            "seed": a.seed,
        }),
    )
}

fn load_graph_arg(arg: &str) -> Result<CompGraph> {
    match arg {
        "llama-block" => load_graph(LLAMA_BLOCK_JSON),
        "two-layer" => load_graph(TWO_LAYER_JSON),
        path => load_graph(&std::fs::read_to_string(path)?),
    }
}

fn split_cmd(a: &SplitArgs) -> Result<()> {
    let g = load_graph_arg(&a.graph)?.scaled(a.batch)?;
    let (slices, cuts) = slice_model(&g)?;
    let id = |i: usize| g.nodes()[i].id.clone();
    let edge = |k: usize| {
        let (u, v) = g.endpoints(k);
        format!("{}->{}", id(u), id(v))
    };
    let slices_json: Vec<_> = slices
        .iter()
        .map(|s| {
            let program: Vec<String> = s
                .program()
                .into_iter()
                .map(|it| match it {
                    ScheduleItem::Op(i) => id(i),
                    ScheduleItem::Send(k) => k.as_str().to_string(),
                })
                .collect();
            json!({
                "index": s.index,
                "ops": s.ops.iter().map(|&i| id(i)).collect::<Vec<_>>(),
                "context_in": s.context_in.iter().map(|&k| edge(k)).collect::<Vec<_>>(),
                "context_out": s.context_out.iter().map(|&k| edge(k)).collect::<Vec<_>>(),
                "context_out_bytes": s.context_out_weight(&g),
                "attention_after": s.attention_after.map(id),
                "program": program,
            })
        })
        .collect();
    let cuts_json: Vec<_> = cuts
        .iter()
        .map(|c| {
            json!({
                "attention": id(c.attention),
                "cut_weight": c.cut_weight,
                "cut_edges": c.cut_edges.iter().map(|&k| edge(k)).collect::<Vec<_>>(),
            })
        })
        .collect();
    for (s, j) in slices.iter().zip(&slices_json) {
        println!(
            "slice {}: {} ops, context out {} B, program {}",
            s.index,
            s.ops.len(),
            s.context_out_weight(&g),
            j["program"]
        );
    }
    write_json(a.out.as_ref(), &json!({ "batch": a.batch, "slices": slices_json, "cuts": cuts_json }))
}

fn pipeline_cmd(a: &PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::new(a.n, a.tm_ms / 1e3, a.ta_ms / 1e3, a.slices)?;
    cfg.allow_stretch = !a.no_stretch;
    let tl = build_schedule(&cfg, a.slots)?;
    let report = validate(&tl);
    println!(
        "n={} over {} slots: {} entries, {} conflicts, {} bubbles, {} migrations{}",
        a.n,
        a.slots,
        tl.entries.len(),
        report.conflicts,
        report.bubbles.len(),
        report.migrations,
        if tl.stretched {
            format!(
                " (stretched: replica idle {:.3}, pool idle {:.3})",
                tl.replica_idle_fraction, tl.pool_idle_fraction
            )
        } else {
            String::new()
        }
    );
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        tl.write_csv(&mut w)?;
        w.flush()?;
    }
    write_json(
        a.report.as_ref(),
        &json!({
            "n_batches": a.n,
            "slots": a.slots,
            "stretched": tl.stretched,
            "replica_idle_fraction": tl.replica_idle_fraction,
            "pool_idle_fraction": tl.pool_idle_fraction,
            "report": report,
        }),
    )
}

fn load_cluster(path: &Path) -> Result<ClusterConfig> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn simulate_cmd(catalog: &Catalog, a: &SimulateArgs) -> Result<()> {
    let model = resolve_model(catalog, &a.model)?;
    let cluster = load_cluster(&a.cluster)?;
    let trace = a.source.load(a.sim.seed)?;
    let mut opts = a.sim.options()?;
    opts.record_iterations = a.iterations.is_some();
    let out = simulate(&model, &cluster, &trace, &opts)?;
    let m = &out.metrics;
    println!(
        "{}: {} tokens in {:.3} s, {:.1} tok/s, avg batch {:.1}, TBT mean {:.2} ms p99 {:.2} ms, {:.0} tokens/$",
        cluster.label(),
        m.tokens_generated,
        m.wall_time,
        m.throughput,
        m.avg_batch,
        m.tbt.mean * 1e3,
        m.tbt.p99 * 1e3,
        m.tokens_per_dollar
    );
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        writeln!(w, "{}", m.to_json())?;
        w.flush()?;
    }
    if let Some(p) = &a.iterations {
        let mut w = csv::Writer::from_writer(create(p)?);
        for rec in &out.iterations {
            w.serialize(rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn optimize_cmd(catalog: &Catalog, a: &OptimizeArgs) -> Result<()> {
    let catalog = match &a.devices {
        Some(p) => Catalog::from_path(p)?,
        None => catalog.clone(),
    };
    let model = resolve_model(&catalog, &a.model)?;
    let compute = catalog.device(&a.compute)?;
    let memory = catalog.device(&a.memory)?;
    let trace = a.source.load(a.sim.seed)?;
    let limits = DopLimits {
        a_max: a.a_max,
        b_max: a.b_max,
    };
    let configs = enumerate_dops(limits, &model, compute, memory, &a.net)?;
    let opts = PlanOptions {
        sim: a.sim.options()?,
        ..PlanOptions::default()
    };
    let results = plan(&model, &trace, &configs, &opts)?;
    for r in &results {
        println!(
            "#{:<2} {:<24} ${:>6.2}/h {:>9.1} tok/s {:>10.0} tok/$ avg batch {:>6.1}{}",
            r.rank,
            r.config.label(),
            r.cost_per_hour,
            r.metrics.throughput,
            r.tokens_per_dollar,
            r.metrics.avg_batch,
            if r.compute_saturated { " compute-saturated" } else { "" }
        );
    }
    for c in equal_cost_pairs(&results, a.tolerance) {
        println!(
            "{} vs {}: cost x{:.3}, throughput {:+.1}%, batch x{:.2}",
            c.disaggregated,
            c.homogeneous,
            c.cost_ratio,
            c.throughput_gain * 100.0,
            c.batch_ratio
        );
    }
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        write_plan_csv(&results, &mut w)?;
        w.flush()?;
    }
    if let Some(p) = &a.plot {
        let rows: Vec<PlotRow> = results
            .iter()
            .map(|r| PlotRow {
                x: r.config.label(),
                series: "tokens_per_dollar".into(),
                value: r.tokens_per_dollar,
            })
            .collect();
        emit_plot_data(p, "config", &rows)?;
    }
    Ok(())
}

fn gen_trace_cmd(a: &GenTraceArgs) -> Result<()> {
    let mut prof = TraceProfile::named(&a.profile, a.rate, a.seed)?;
    if let Some(n) = a.requests {
        prof.n_requests = n;
    }
    if let Some(s) = a.sigma {
        prof.sigma = s;
    }
    let trace = gen_trace(&prof)?;
    println!("{} requests over {:.1} s", trace.len(), trace.last().map_or(0.0, |r| r.arrival_s));
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            write_trace_csv(&trace, &mut w)?;
            w.flush()?;
        }
        None => write_trace_csv(&trace, std::io::stdout().lock())?,
    }
    Ok(())
}
