use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hetero-decode"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

const SUBCOMMANDS: [&str; 9] = [
    "roofline",
    "min-bandwidth",
    "kv-capacity",
    "attention-check",
    "split",
    "pipeline",
    "simulate",
    "optimize",
    "gen-trace",
];

#[test]
fn help_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let out = run(&[sub, "--help"], tmp.path());
        assert!(out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    let out = run(&["--version"], tmp.path());
    let v = String::from_utf8(out.stdout).unwrap();
    let ver = v.split_whitespace().nth(1).unwrap();
    let parts: Vec<&str> = ver.split('.').collect();
    assert_eq!(parts.len(), 3);
    assert!(parts.iter().all(|p| p.parse::<u64>().is_ok()));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["kv-capacity", "--nope"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["split"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        run(&["kv-capacity", "--model", "gpt-9", "--device", "H100", "--seq", "1"], tmp.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["pipeline", "--n", "3", "--tm-ms", "90", "--ta-ms", "80", "--no-stretch"], tmp.path()).status.code(),
        Some(1)
    );
    let out = run(&["simulate", "--model", "llama3-70b", "--cluster", "c.json", "--trace", "t.csv", "--profile", "kimi-ta"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn min_bandwidth_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["min-bandwidth", "--model", "llama3-70b", "--batch", "300", "--seq", "8192", "--alpha", "0.2", "--dop", "2,4", "--out", "mb.json"],
        tmp.path(),
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("mb.json")).unwrap()).unwrap();
    assert_eq!(v["bytes_per_iter"], 884_736_000u64);
    assert!(v["min_bw_gbps"].as_f64().unwrap() > 0.0);
}

#[test]
fn outputs_are_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cluster = r#"{"compute_devices":[{"device":"H100","count":2}],"memory_devices":[{"device":"H20","count":2}],"network":"fhbn","mode":"disaggregated"}"#;
    std::fs::write(tmp.path().join("c.json"), cluster).unwrap();
    let jobs: [&[&str]; 6] = [
        &["gen-trace", "--profile", "azure-code", "--requests", "120", "--rate", "8", "--seed", "3", "--out", "OUT"],
        &["split", "--graph", "two-layer", "--batch", "16", "--out", "OUT"],
        &["pipeline", "--n", "4", "--tm-ms", "90", "--ta-ms", "30", "--slots", "200", "--out", "OUT"],
        &["attention-check", "--trials", "20", "--seed", "5", "--out", "OUT"],
        &["simulate", "--model", "llama3-70b", "--cluster", "c.json", "--profile", "azure-conv", "--requests", "80", "--rate", "10", "--seed", "7", "--out", "OUT"],
        &["optimize", "--model", "llama-33b", "--a-max", "2", "--b-max", "2", "--profile", "azure-conv", "--requests", "80", "--rate", "10", "--out", "OUT"],
    ];
    for (i, job) in jobs.iter().enumerate() {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let name = format!("out{i}_{rep}");
            let args: Vec<&str> = job.iter().map(|&a| if a == "OUT" { name.as_str() } else { a }).collect();
            let o = run(&args, tmp.path());
            assert!(o.status.success(), "{job:?}: {}", String::from_utf8_lossy(&o.stderr));
            outs.push(std::fs::read(tmp.path().join(&name)).unwrap());
        }
        assert!(!outs[0].is_empty());
        assert_eq!(outs[0], outs[1], "{job:?}");
    }
}

#[test]
fn trace_file_round_trip_and_out_dir_override() {
    let tmp = tempfile::tempdir().unwrap();
    let outdir = tmp.path().join("artifacts");
    let st = bin()
        .args(["gen-trace", "--profile", "azure-conv", "--requests", "50", "--seed", "1", "--out", "t.csv"])
        .env("HETERO_DECODE_OUT_DIR", &outdir)
        .current_dir(tmp.path())
        .status()
        .unwrap();
    assert!(st.success());
    let csv = std::fs::read_to_string(outdir.join("t.csv")).unwrap();
    assert!(csv.starts_with("request_id,arrival_s,prompt_tokens,output_tokens\n"));
    std::fs::write(
        tmp.path().join("c.json"),
        r#"{"compute_devices":[{"device":"H100","count":4}],"network":"none","mode":"homogeneous-tp"}"#,
    )
    .unwrap();
    let o = run(
        &["simulate", "--model", "llama3-70b", "--cluster", "c.json", "--trace", "artifacts/t.csv", "--iterations", "it.csv", "--out", "m.json"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["requests_completed"], 50);
    let it = std::fs::read_to_string(tmp.path().join("it.csv")).unwrap();
    assert!(it.starts_with("batch,start_us,end_us,size,context_tokens\n"));
}

#[test]
fn plot_data_is_tidy() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        &["min-bandwidth", "--model", "llama3-70b", "--batch", "64", "--seq", "4096", "--dop", "2,4", "--dop", "1,2", "--sweep", "16,64,256", "--plot", "bw.csv"],
        tmp.path(),
    );
    assert!(o.status.success());
    let text = std::fs::read_to_string(tmp.path().join("bw.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("batch,series,value"));
    let series: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(series.len(), 2);
    let o = run(
        &["roofline", "--model", "llama3-70b", "--batch", "64", "--sweep", "1,8,64,512", "--plot", "mfu.csv"],
        tmp.path(),
    );
    assert!(o.status.success());
    assert!(std::fs::read_to_string(tmp.path().join("mfu.csv")).unwrap().contains("512,mfu,"));
}
