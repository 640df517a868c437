//! One test per acceptance criterion. Each prints a single PASS/FAIL line with
//! the measured values, then asserts.

mod common;

use std::process::Command;

use hetero_decode::attention::{
    exact_attention, head_partition, max_rel_error, partial_attention, random_instance, random_multi_head,
    PartialAttention,
};
use hetero_decode::error::Error;
use hetero_decode::graph::{load_graph, min_cut_at, LLAMA_BLOCK_JSON};
use hetero_decode::model::{builtin_catalog, ClusterConfig, LlmSpec, PoolCapacity, TraceRecord};
use hetero_decode::perf::{
    comm_volume, estimate_timing, max_batch, min_bandwidth, EfficiencyProfile, TimingEstimate, TimingSource,
};
use hetero_decode::pipeline::{build_schedule, validate, PipelineConfig, Resource, TaskKind};
use hetero_decode::sim::{gen_trace, simulate, xfer_time, NetPreset, SimMetrics, SimOptions, TraceProfile};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {n} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn model(name: &str) -> LlmSpec {
    builtin_catalog().model(name).unwrap().clone()
}

#[test]
fn c1_kv_capacity() {
    let m = model("llama3-70b");
    let lib = max_batch(80e9, 0.0, &m, 8192, 0.0).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hetero-decode"))
        .args(["kv-capacity", "--model", "llama3-70b", "--device", "H100", "--seq", "8192"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cli: u64 = stdout.split_whitespace().next().and_then(|t| t.parse().ok()).unwrap_or(0);
    let ok = lib == 29 && cli == 29 && out.status.success();
    report(1, "kv capacity", ok, &format!("library {lib}, cli {cli} (expect 29)"));
}

#[test]
fn c2_bandwidth_formula() {
    let m = model("llama3-70b");
    let vol = comm_volume(&m, 300).unwrap();
    let timing = TimingEstimate {
        t_model: 0.075,
        t_attn: 0.075,
        t_net: 0.0,
        model_bound: hetero_decode::perf::Bound::Compute,
        attn_bound: hetero_decode::perf::Bound::Bandwidth,
        source: TimingSource::Measured,
    };
    let gbps = min_bandwidth(&m, 300, 0.2, &timing).unwrap() / 1e9;

    let cat = builtin_catalog();
    let (h100, h20) = (cat.device("H100").unwrap(), cat.device("H20").unwrap());
    let eff = EfficiencyProfile::default();
    let mut monotone = true;
    let mut series = Vec::new();
    for (a, b) in [(1, 1), (2, 4), (4, 8)] {
        let mut prev = f64::INFINITY;
        for l in [2048, 8192, 32768] {
            let t = estimate_timing(&m, 300, l, &PoolCapacity::of(h100, a), &PoolCapacity::of(h20, b), &eff).unwrap();
            let bw = min_bandwidth(&m, 300, 0.2, &t).unwrap();
            monotone &= bw <= prev;
            prev = bw;
            series.push(format!("({a},{b})@{l}={:.2}", bw / 1e9));
        }
    }
    let ok = vol == 884_736_000.0 && (gbps - 29.49).abs() <= 0.01 && monotone;
    report(
        2,
        "bandwidth formula",
        ok,
        &format!(
            "comm_volume {vol} B, min_bw {gbps:.4} GB/s (29.49 +/- 0.01), non-increasing in l: {monotone} [{}]",
            series.join(" ")
        ),
    );
}

/// Merge partials along a random binary tree.
fn merge_tree<R: Rng>(rng: &mut R, parts: &[PartialAttention<f64>]) -> PartialAttention<f64> {
    match parts {
        [] => PartialAttention::identity(0),
        [one] => one.clone(),
        _ => {
            let cut = rng.random_range(1..parts.len());
            let left = merge_tree(rng, &parts[..cut]);
            let right = merge_tree(rng, &parts[cut..]);
            left.merge(&right)
        }
    }
}

#[test]
fn c3_attention_math() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA77E);
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut laws = true;
    for trial in 0..1000 {
        let d = rng.random_range(1..=64);
        let l = rng.random_range(1..=256);
        let max_logit = if trial % 4 == 0 { 80.0 } else { rng.random_range(0.1..80.0) };
        let inst = random_instance(&mut rng, d, l, max_logit);
        let parts = rng.random_range(1..=8);
        let mut idx: Vec<usize> = (0..l).collect();
        idx.shuffle(&mut rng);
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); parts];
        for j in idx {
            buckets[rng.random_range(0..parts)].push(j);
        }
        let partials: Vec<_> = buckets.iter().map(|b| partial_attention(&inst, b)).collect();
        let merged = merge_tree(&mut rng, &partials).finalize().unwrap();
        let exact = exact_attention(&inst).unwrap();
        worst = worst.max(max_rel_error(&merged, &exact));
        worst_oracle = worst_oracle.max(max_rel_error(&exact, &common::naive_attention(&inst)));

        let id = PartialAttention::identity(d);
        let p = &partials[0];
        laws &= id.merge(p) == *p && p.merge(&id) == *p;
        if partials.len() >= 2 {
            let ab = partials[0].merge(&partials[1]);
            let ba = partials[1].merge(&partials[0]);
            if !ab.is_identity() {
                laws &= max_rel_error(&ab.finalize().unwrap(), &ba.finalize().unwrap()) <= 1e-12;
            }
        }
    }
    laws &= matches!(PartialAttention::<f64>::identity(4).finalize(), Err(Error::EmptyPartial));

    let mut heads_exact = true;
    for (kv_heads, group) in [(8, 8), (8, 1), (4, 2), (6, 3)] {
        let mh = random_multi_head(&mut rng, kv_heads, group, 32, 64);
        let whole = mh.attend_all().unwrap();
        for devices in (1..=kv_heads).filter(|dv| kv_heads % dv == 0) {
            let mut cat = Vec::new();
            for r in head_partition(kv_heads, devices).unwrap() {
                cat.extend(mh.attend_kv_heads(r).unwrap());
            }
            heads_exact &= cat == whole;
        }
    }
    let ok = worst <= 1e-6 && worst_oracle <= 1e-6 && laws && heads_exact;
    report(
        3,
        "attention math",
        ok,
        &format!(
            "1000 trials: merge-tree vs exact {worst:.2e}, exact vs naive oracle {worst_oracle:.2e} (<= 1e-6); \
             identity/empty/commutativity laws {laws}; head-partition concat exact {heads_exact}"
        ),
    );
}

#[test]
fn c4_min_cut_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC07);
    let mut mismatches = 0;
    let mut not_prefix = 0;
    let mut graphs: Vec<_> = (0..200)
        .map(|_| {
            let n = rng.random_range(3..=12);
            common::random_dag(&mut rng, n)
        })
        .collect();
    graphs.push(load_graph(LLAMA_BLOCK_JSON).unwrap());
    graphs.push(common::diamond());
    for g in &graphs {
        for a in g.attention_nodes() {
            let cut = min_cut_at(g, a).unwrap();
            if cut.cut_weight != common::brute_force_cut(g, a) {
                mismatches += 1;
            }
            if !cut.is_prefix_closed(g) {
                not_prefix += 1;
            }
        }
    }
    let ok = mismatches == 0 && not_prefix == 0;
    report(
        4,
        "min-cut oracle equivalence",
        ok,
        &format!("{} graphs: {mismatches} weight mismatches, {not_prefix} non-prefix cuts", graphs.len()),
    );
}

#[test]
fn c5_pipelining() {
    let mut details = Vec::new();
    let mut ok = true;
    for n in 2..=8u64 {
        let tm = 0.090;
        let cfg = PipelineConfig::new(n, tm, tm / (n - 1) as f64, 80).unwrap();
        let tl = build_schedule(&cfg, 1000).unwrap();
        let rep = validate(&tl);
        let assignment_ok = tl
            .entries
            .iter()
            .filter(|e| e.kind == TaskKind::ModelSlice)
            .all(|e| e.resource == Resource::Replica((e.batch + e.slice) % (n - 1) + 1));
        let mig_ok = n != 2 || rep.migrations == 0;
        ok &= cfg.is_feasible() && rep.conflicts == 0 && rep.bubbles.is_empty() && assignment_ok && mig_ok;
        details.push(format!(
            "n={n}: {}c/{}b/{}m{}",
            rep.conflicts,
            rep.bubbles.len(),
            rep.migrations,
            if assignment_ok { "" } else { " BAD-ASSIGN" }
        ));
    }
    report(5, "pipelining", ok, &details.join(", "));
}

fn analytic_iteration_us(m: &LlmSpec, compute: &PoolCapacity, memory: &PoolCapacity, ctx: u64) -> f64 {
    let eff = EfficiencyProfile::default();
    let n = m.n_params as f64;
    let e = m.bytes_per_elem as f64;
    let d = m.hidden_dim as f64;
    let t_m = (2.0 * n / (compute.peak_flops * eff.gemm_eff)).max(e * (n + 2.0 * d) / (compute.mem_bw * eff.gemm_eff));
    let kv = 2.0 * e * d / m.gqa_group as f64 * m.layers as f64 * ctx as f64;
    let t_a = (2.0 * kv * m.gqa_group as f64 / e / (memory.peak_flops * eff.attn_mbu)).max(kv / (memory.mem_bw * eff.attn_mbu));
    (t_m + t_a) * 1e6
}

#[test]
fn c6_simulator_consistency() {
    let cat = builtin_catalog();
    let m = model("llama3-70b");
    let (h100, h20) = (cat.device("H100").unwrap(), cat.device("H20").unwrap());

    let cluster = ClusterConfig::disaggregated(h100, 2, h20, 2, "ideal").unwrap();
    let trace = [TraceRecord {
        request_id: 0,
        arrival_s: 0.0,
        prompt_tokens: 1000,
        output_tokens: 40,
    }];
    let opts = SimOptions {
        network: Some(NetPreset::ideal()),
        record_iterations: true,
        ..SimOptions::default()
    };
    let out = simulate(&m, &cluster, &trace, &opts).unwrap();
    let layers = m.layers as f64;
    let mut worst_dev: f64 = 0.0;
    for rec in &out.iterations {
        let expect = analytic_iteration_us(&m, &cluster.compute_capacity(), &cluster.memory_capacity(), rec.context_tokens);
        worst_dev = worst_dev.max(((rec.end_us - rec.start_us) as f64 - expect).abs());
    }
    let tbt_ok = out.iterations.len() == 40 && worst_dev <= layers;

    let prof = TraceProfile {
        n_requests: 600,
        ..TraceProfile::named("azure-conv", 40.0, 3).unwrap()
    };
    let stress = gen_trace(&prof).unwrap();
    let mut checks = 0;
    let mut violations = 0;
    for (c, nb) in [
        (ClusterConfig::disaggregated(h100, 2, h20, 1, "fhbn").unwrap(), 2),
        (ClusterConfig::homogeneous(h100, 2).unwrap(), 1),
    ] {
        let o = simulate(&m, &c, &stress, &SimOptions { n_batches: nb, ..SimOptions::default() }).unwrap();
        checks += o.kv_checks;
        violations += o.metrics.kv_violations;
    }
    let ledger_ok = checks > 0 && violations == 0;

    let dir = tempfile::tempdir().unwrap();
    let cluster_path = dir.path().join("cluster.json");
    std::fs::write(&cluster_path, serde_json::to_string(&ClusterConfig::disaggregated(h100, 2, h20, 4, "fhbn").unwrap()).unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_hetero-decode"))
            .args(["simulate", "--model", "llama3-70b", "--cluster"])
            .arg(&cluster_path)
            .args(["--profile", "azure-conv", "--requests", "300", "--rate", "20", "--seed", "7", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    let (a, b) = (run("a.json"), run("b.json"));
    let identical = a == b && serde_json::from_slice::<SimMetrics>(&a).is_ok();

    let ok = tbt_ok && ledger_ok && identical;
    report(
        6,
        "simulator consistency",
        ok,
        &format!(
            "{} iterations, worst deviation from analytic {worst_dev:.1} us (<= {layers} ticks); \
             ledger {checks} checks / {violations} violations; same-seed metrics byte-identical: {identical}",
            out.iterations.len()
        ),
    );
}

#[test]
fn c7_equal_cost_comparison() {
    let cat = builtin_catalog();
    let m = model("llama3-70b");
    let (h100, h20) = (cat.device("H100").unwrap(), cat.device("H20").unwrap());
    let prof = TraceProfile {
        n_requests: 3000,
        ..TraceProfile::named("azure-conv", 100.0, 7).unwrap()
    };
    let trace = gen_trace(&prof).unwrap();
    let base = SimOptions {
        horizon_s: Some(30.0),
        ..SimOptions::default()
    };
    let disagg = ClusterConfig::disaggregated(h100, 2, h20, 4, "fhbn").unwrap();
    let homog = ClusterConfig::homogeneous(h100, 4).unwrap();
    let d = simulate(&m, &disagg, &trace, &SimOptions { n_batches: 2, ..base.clone() }).unwrap().metrics;
    let h = simulate(&m, &homog, &trace, &base).unwrap().metrics;
    let batch_ratio = d.avg_batch / h.avg_batch;
    let gain = d.throughput / h.throughput - 1.0;
    let batch_ok = (1.8..=2.6).contains(&batch_ratio);
    let gain_ok = (0.10..=1.00).contains(&gain);
    report(
        7,
        "equal-cost comparison",
        batch_ok && gain_ok,
        &format!(
            "DOP(2,4) ${:.2}/h vs 4xH100 ${:.2}/h: avg batch {:.1} vs {:.1} (ratio {batch_ratio:.2}, want [1.8, 2.6]), \
             throughput {:.0} vs {:.0} tok/s (gain {:+.1}%, want [+10%, +100%]), TBT {:.1} vs {:.1} ms",
            disagg.cost_per_hour(),
            homog.cost_per_hour(),
            d.avg_batch,
            h.avg_batch,
            d.throughput,
            h.throughput,
            gain * 100.0,
            d.tbt.mean * 1e3,
            h.tbt.mean * 1e3
        ),
    );
}

#[test]
fn c8_network_presets() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (p, rtt_us, bw) in [(NetPreset::fhbn(), 33.0, 45.7e9), (NetPreset::nccl(), 66.6, 35.5e9)] {
        let rtt = p.round_trip(1.0) * 1e6;
        let rtt_ok = (rtt - rtt_us).abs() < 1e-3 && (p.round_trip(0.0) * 1e6 - rtt_us).abs() < 1e-9;
        let gb = 1e9;
        let asymptotic = gb / (xfer_time(gb, &p) - xfer_time(0.0, &p));
        let effective = gb / xfer_time(gb, &p);
        let bw_ok = (asymptotic / bw - 1.0).abs() <= 1e-3;
        ok &= rtt_ok && bw_ok;
        detail.push(format!(
            "{}: rtt {rtt:.3} us (want {rtt_us}), 1 GB asymptotic {:.3} GB/s (want {:.1}), end-to-end {:.3} GB/s",
            p.name,
            asymptotic / 1e9,
            bw / 1e9,
            effective / 1e9
        ));
    }
    report(8, "network presets", ok, &detail.join("; "));
}

#[test]
fn c9_overlap() {
    let cat = builtin_catalog();
    let (h100, h20) = (cat.device("H100").unwrap(), cat.device("H20").unwrap());
    let prof = TraceProfile {
        n_requests: 1000,
        ..TraceProfile::named("azure-conv", 50.0, 11).unwrap()
    };
    let trace = gen_trace(&prof).unwrap();
    let cluster = ClusterConfig::disaggregated(h100, 2, h20, 4, "fhbn").unwrap();
    let reduction = |name: &str| {
        let m = model(name);
        let tbt = |overlap| {
            let opts = SimOptions {
                overlap,
                horizon_s: Some(20.0),
                ..SimOptions::default()
            };
            simulate(&m, &cluster, &trace, &opts).unwrap().metrics.tbt.mean
        };
        let (off, on) = (tbt(false), tbt(true));
        (1.0 - on / off, off, on)
    };
    let (r65, off65, on65) = reduction("llama-65b");
    let (r70, off70, on70) = reduction("llama3-70b");
    let ok = r65 > 0.0 && r70 < r65;
    report(
        9,
        "overlap option",
        ok,
        &format!(
            "LLaMA-65B TBT {:.2} -> {:.2} ms (-{:.1}%), LLaMA3-70B {:.2} -> {:.2} ms (-{:.1}%)",
            off65 * 1e3,
            on65 * 1e3,
            r65 * 100.0,
            off70 * 1e3,
            on70 * 1e3,
            r70 * 100.0
        ),
    );
}
