use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-offload"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to start binary")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is not JSON")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gen_zipf(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["gen-trace", "--model", "zipf", "--out", name];
    args.extend_from_slice(extra);
    let out = run(dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_trace_line_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "gen-trace", "--model", "zipf", "--layers", "2", "--experts", "8", "--top-k", "2", "--tokens", "16",
            "--skew", "1.0", "--seed", "1", "--out", "t.jsonl",
        ],
    );
    let summary = json(&out);
    assert_eq!(summary["activation_records"], 32);
    let text = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 33);
}

#[test]
fn gen_trace_toy_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["gen-trace", "--model", "toy", "--layers", "4", "--tokens", "5", "--out", "a.jsonl", "--out-spec", "s.jsonl"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(d.join("a.jsonl")).unwrap().lines().count(), 1 + 20);
    assert_eq!(std::fs::read_to_string(d.join("s.jsonl")).unwrap().lines().count(), 1 + 15);
    assert_eq!(code(&run(d, &["gen-trace", "--model", "toy", "--out", "b.jsonl"])), 2);

    let out = run(d, &["gen-trace", "--model", "markov", "--tokens", "0", "--out", "z.jsonl"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(d.join("z.jsonl")).unwrap().lines().count(), 1);
    let m = json(&run(d, &["simulate", "--trace", "z.jsonl", "--cache-size", "4", "--out", "e.jsonl"]));
    assert_eq!(m["hit_rate"], 0.0);
    assert_eq!(m["empty"], true);
    let m = json(&run(d, &["metrics", "--log", "e.jsonl"]));
    assert_eq!(m["empty"], true);
}

#[test]
fn gen_trace_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("toy.conf"), "layers = 3\nexperts = 4\ntop_k = 1\ntokens = 7\nmixing_scale = 0\n").unwrap();
    let s = json(&run(d, &["gen-trace", "--model", "toy", "--config", "toy.conf", "--out", "a.jsonl", "--out-spec", "s.jsonl"]));
    assert_eq!(s["activation_records"], 21);
    let m = json(&run(d, &["metrics", "--spec", "s.jsonl"]));
    assert_eq!(m["precision"], 1.0);
    std::fs::write(d.join("bad.conf"), "layers = 3\ncolour = red\n").unwrap();
    assert_eq!(code(&run(d, &["gen-trace", "--model", "toy", "--config", "bad.conf", "--out", "a.jsonl", "--out-spec", "s.jsonl"])), 2);
}

#[test]
fn simulate_flags_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_zipf(d, "t.jsonl", &["--experts", "8", "--tokens", "40"]);
    let a = run(d, &["simulate", "--trace", "t.jsonl", "--policy", "lfu", "--offloads", "4", "--out", "a.jsonl"]);
    let b = run(d, &["simulate", "--trace", "t.jsonl", "--policy", "lfu", "--cache-size", "4", "--out", "b.jsonl"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());

    let opt = json(&run(d, &["simulate", "--trace", "t.jsonl", "--policy", "opt", "--cache-size", "4"]));
    assert!(opt["hit_rate"].as_f64().unwrap() >= json(&a)["hit_rate"].as_f64().unwrap());

    assert_eq!(code(&run(d, &["simulate", "--trace", "t.jsonl", "--cache-size", "1"])), 2);
    assert_eq!(code(&run(d, &["simulate", "--trace", "missing.jsonl", "--cache-size", "4"])), 1);
    assert_eq!(code(&run(d, &["simulate", "--trace", "t.jsonl"])), 2);
    assert_eq!(code(&run(d, &["simulate", "--trace", "t.jsonl", "--cache-size", "4", "--offloads", "4"])), 2);
    assert_eq!(code(&run(d, &["simulate", "--trace", "t.jsonl", "--cache-size", "4", "--policy", "fifo"])), 2);
    std::fs::write(d.join("broken.jsonl"), "{\"kind\":\"activation\",\"num_layers\":1,\"num_experts\":4,\"top_k\":1}\n{\"t\":0,\"l\":0,\"a\":[9]}\n").unwrap();
    let out = run(d, &["simulate", "--trace", "broken.jsonl", "--cache-size", "2"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn metrics_spec_precision_equals_recall() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["gen-trace", "--model", "toy", "--layers", "6", "--tokens", "20", "--out", "a.jsonl", "--out-spec", "s.jsonl"]);
    let m = json(&run(d, &["metrics", "--spec", "s.jsonl"]));
    assert_eq!(m["precision"], m["recall"]);
    assert_eq!(m["fp"], m["fn"]);
    let h = json(&run(d, &["metrics", "--histogram", "a.jsonl"]));
    assert_eq!(h["layers"].as_array().unwrap().len(), 6);
}

#[test]
fn cost_fits_memory() {
    let dir = tempfile::tempdir().unwrap();
    let out = json(&run(dir.path(), &["cost", "--fit-memory", "4:11148.3,5:9145.8,6:7127.7", "--predict", "4,7"]));
    let slope = out["model"]["slope_mb_per_offload"].as_f64().unwrap();
    assert!((slope + 2010.3).abs() < 0.05, "{slope}");
    let p = out["predictions"].as_array().unwrap();
    assert!(p[1]["peak_memory_mb"].as_f64().unwrap() < p[0]["peak_memory_mb"].as_f64().unwrap());
    assert_eq!(code(&run(dir.path(), &["cost", "--fit-memory", "4:1"])), 2);
}

#[test]
fn render_counts_match_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_zipf(d, "t.jsonl", &["--layers", "2", "--tokens", "30"]);
    run(d, &["simulate", "--trace", "t.jsonl", "--cache-size", "4", "--out", "e.jsonl"]);
    let out = run(d, &["render", "--log", "e.jsonl", "--layer", "0", "--out", "p1l0.svg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = std::fs::read_to_string(d.join("p1l0.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let count = |c: &str| doc.descendants().filter(|n| n.attribute("class") == Some(c)).count();
    assert_eq!(count("activated"), 60);
    // cold start: the cache is empty only before token 0, then holds 2, then 4
    assert_eq!(count("cached"), 2 + 4 * 28);

    let text = run(d, &["render", "--log", "e.jsonl", "--layer", "1", "--text"]);
    assert!(String::from_utf8_lossy(&text.stdout).starts_with("layer 2\n"));
    assert_eq!(code(&run(d, &["render", "--log", "e.jsonl", "--layer", "7"])), 2);
    let h = run(d, &["render", "--histogram", "t.jsonl", "--layer", "1"]);
    assert_eq!(String::from_utf8_lossy(&h.stdout).matches("class=\"bar\"").count(), 8);
}

#[test]
fn compare_batches_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = json(&run(
        d,
        &["compare", "--policies", "lru,lfu", "--seeds", "20", "--layers", "1", "--tokens", "512", "--cache-size", "4", "--json"],
    ));
    let rows = out["rows"].as_array().unwrap();
    assert!(rows[1]["hit_rate"].as_f64().unwrap() >= rows[0]["hit_rate"].as_f64().unwrap());
    assert_eq!(out["per_trace"].as_array().unwrap().len(), 20);

    let out = json(&run(d, &["compare", "--policies", "opt,lru", "--seeds", "10", "--layers", "2", "--cache-size", "3", "--json"]));
    for t in out["per_trace"].as_array().unwrap() {
        assert!(t["hit_rate"]["opt"].as_f64() >= t["hit_rate"]["lru"].as_f64());
    }

    gen_zipf(d, "t.jsonl", &["--tokens", "50"]);
    let table = run(d, &["compare", "--trace", "t.jsonl", "--policies", "lfu", "--cache-size", "4"]);
    let text = String::from_utf8_lossy(&table.stdout);
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(text.lines().nth(1).unwrap().starts_with("lfu"));
}

#[test]
fn sweep_rows_and_memory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_zipf(d, "t.jsonl", &["--layers", "2", "--tokens", "80"]);
    let out = json(&run(d, &["sweep", "--trace", "t.jsonl", "--policies", "opt", "--cache-sizes", "2..8"]));
    let rows = out["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    let hits: Vec<f64> = rows.iter().map(|r| r["hit_rate"].as_f64().unwrap()).collect();
    assert!(hits.windows(2).all(|w| w[1] >= w[0]), "{hits:?}");

    let out = json(&run(d, &["sweep", "--trace", "t.jsonl", "--policies", "lru", "--offloads", "0..6"]));
    let mem: Vec<f64> = out["rows"].as_array().unwrap().iter().map(|r| r["peak_memory_mb"].as_f64().unwrap()).collect();
    assert_eq!(mem.len(), 7);
    assert!(mem.windows(2).all(|w| w[1] < w[0]));

    let single = json(&run(d, &["sweep", "--trace", "t.jsonl", "--policies", "lru", "--cache-sizes", "4"]));
    assert_eq!(single["rows"].as_array().unwrap().len(), 1);
    assert_eq!(code(&run(d, &["sweep", "--trace", "t.jsonl", "--cache-sizes", "5..2"])), 2);
}

#[test]
fn speculate_alpha_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = json(&run(dir.path(), &["speculate", "--layers", "8", "--alphas", "0,1", "--seeds", "3"]));
    let curve = out["curve"].as_array().unwrap();
    assert_eq!(curve[0]["mean_accuracy"], 1.0);
    assert!(curve[1]["mean_accuracy"].as_f64().unwrap() < 1.0);
}
