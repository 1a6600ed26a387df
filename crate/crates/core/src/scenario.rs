//! Executable scenarios: a pipeline, its parameters and predicates over the
//! pipeline's JSON output.
//!
//! A scenario file uses the flat `key = value` format. `name` and
//! `pipeline` are required, every `expect*` key holds one JSON predicate,
//! and all other keys are pipeline parameters:
//!
//! ```text
//! name = lfu-beats-lru-on-skew
//! pipeline = policy-compare
//! seeds = 1..20
//! skew = 1.0
//! expect.margin = {"at": "/mean_hit_rate/lfu", "op": ">", "than": "/mean_hit_rate/lru"}
//! expect.rows = {"at": "/per_seed/0/hit_rate/lru", "op": ">=", "value": 0}
//! ```
//!
//! A predicate compares the value at JSON pointer `at` with either a
//! literal `value` or the value at pointer `than`. `op` is one of `==`,
//! `!=`, `<`, `<=`, `>`, `>=`; `tol` widens `==` to an absolute tolerance.
//! Seed lists accept `a..b` (inclusive) or comma-separated values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::FlatConfig;
use crate::cost::{fit_memory_model, parse_memory_points};
use crate::error::{Error, Result};
use crate::metrics::{cache_metrics, speculation_metrics};
use crate::policy::{PolicyKind, StepOutcome};
use crate::render::{render_cache_trace, render_speculation, RenderSpec};
use crate::sim::{event_log_to_string, simulate, SimConfig};
use crate::toy::{run_model, ToyModelConfig};
use crate::trace::{
    read_trace, trace_to_string, ActivationTrace, ExpertId, ExpertSet, ModelShape, Trace,
};
use crate::tracegen::{gen_markov, gen_zipf, random_set, random_speculation_trace, MarkovParams, ZipfParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    SpeculationIdentity,
    FullCacheRatio,
    AlphaSweep,
    PolicyOracle,
    OptDominance,
    PolicyCompare,
    MemoryFit,
    CompulsoryMisses,
    RenderConservation,
    RoundTrip,
    Determinism,
}

const PIPELINES: [(&str, Pipeline); 11] = [
    ("speculation-identity", Pipeline::SpeculationIdentity),
    ("full-cache-ratio", Pipeline::FullCacheRatio),
    ("alpha-sweep", Pipeline::AlphaSweep),
    ("policy-oracle", Pipeline::PolicyOracle),
    ("opt-dominance", Pipeline::OptDominance),
    ("policy-compare", Pipeline::PolicyCompare),
    ("memory-fit", Pipeline::MemoryFit),
    ("compulsory-misses", Pipeline::CompulsoryMisses),
    ("render-conservation", Pipeline::RenderConservation),
    ("round-trip", Pipeline::RoundTrip),
    ("determinism", Pipeline::Determinism),
];

impl Pipeline {
    fn params(self) -> &'static [&'static str] {
        use Pipeline::*;
        match self {
            SpeculationIdentity => &["traces", "seed", "toy_seeds", "toy_layers", "toy_tokens", "mixing_scales"],
            FullCacheRatio => &["pairs", "layers", "experts", "tokens", "skew", "seed", "policies"],
            AlphaSweep => &["alphas", "seeds", "layers", "experts", "top_k", "hidden_dim", "tokens", "skew"],
            PolicyOracle => &["experts", "top_k", "tokens", "cache_sizes", "policies", "max_traces", "seed"],
            OptDominance => &["traces", "cache_sizes", "layers", "experts", "top_k", "tokens", "skew", "seed"],
            PolicyCompare => &[
                "policies", "seeds", "model", "layers", "experts", "top_k", "tokens", "skew", "repeat_prob",
                "cache_size", "warmup",
            ],
            MemoryFit => &["points", "holdout"],
            CompulsoryMisses => &["traces", "layers", "experts", "top_k", "tokens", "skew", "seed", "policies"],
            RenderConservation => &["logs", "seed", "cell_px"],
            RoundTrip => &["traces", "seed"],
            Determinism => &["runs", "seed", "tokens"],
        }
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PIPELINES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, p)| *p)
            .ok_or_else(|| {
                let names: Vec<&str> = PIPELINES.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown pipeline {s:?} (known: {})", names.join(", ")))
            })
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = PIPELINES.iter().find(|(_, p)| p == self).map(|(n, _)| *n).unwrap_or("?");
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub at: String,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub than: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

impl Predicate {
    fn validate(&self) -> Result<()> {
        if self.value.is_some() == self.than.is_some() {
            return Err(Error::Config(format!(
                "predicate on {:?} needs exactly one of `value` and `than`",
                self.at
            )));
        }
        Ok(())
    }

    /// Evaluates against `output`; a missing pointer is an error.
    pub fn eval(&self, output: &Value) -> Result<(bool, Value, Value)> {
        let lookup = |p: &str| {
            output
                .pointer(p)
                .cloned()
                .ok_or_else(|| Error::Config(format!("pointer {p:?} not found in output")))
        };
        let left = lookup(&self.at)?;
        let right = match (&self.value, &self.than) {
            (Some(v), _) => v.clone(),
            (None, Some(p)) => lookup(p)?,
            (None, None) => return Err(Error::Config("predicate has no right-hand side".into())),
        };
        let ok = match (left.as_f64(), right.as_f64()) {
            (Some(a), Some(b)) => {
                let tol = self.tol.unwrap_or(0.0);
                match self.op {
                    Op::Eq => (a - b).abs() <= tol,
                    Op::Ne => (a - b).abs() > tol,
                    Op::Lt => a < b,
                    Op::Le => a <= b,
                    Op::Gt => a > b,
                    Op::Ge => a >= b,
                }
            }
            _ => match self.op {
                Op::Eq => left == right,
                Op::Ne => left != right,
                _ => {
                    return Err(Error::Config(format!(
                        "ordering comparison on non-numbers {left} and {right}"
                    )))
                }
            },
        };
        Ok((ok, left, right))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub pipeline: Pipeline,
    pub params: FlatConfig,
    /// Keyed by the full `expect*` key, in key order.
    pub expect: Vec<(String, Predicate)>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = FlatConfig::parse(text)?;
        let name = cfg
            .get_str("name")
            .ok_or_else(|| Error::Config("scenario has no `name`".into()))?
            .to_string();
        let pipeline: Pipeline = cfg
            .get_str("pipeline")
            .ok_or_else(|| Error::Config(format!("scenario {name:?} has no `pipeline`")))?
            .parse()?;
        let mut params = FlatConfig::default();
        let mut expect = Vec::new();
        for key in cfg.keys() {
            let value = cfg.get_str(key).unwrap_or_default();
            if key == "name" || key == "pipeline" {
                continue;
            }
            if key.starts_with("expect") {
                let p: Predicate = serde_json::from_str(value)
                    .map_err(|e| Error::Config(format!("bad predicate {key:?}: {e}")))?;
                p.validate()?;
                expect.push((key.to_string(), p));
            } else {
                params.set(key, value);
            }
        }
        params.ensure_known(pipeline.params())?;
        if expect.is_empty() {
            return Err(Error::Config(format!("scenario {name:?} has no predicates")));
        }
        Ok(Scenario {
            name,
            pipeline,
            params,
            expect,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub key: String,
    #[serde(flatten)]
    pub predicate: Predicate,
    pub actual: Value,
    pub expected: Value,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub pipeline: String,
    pub passed: bool,
    pub output: Value,
    pub checks: Vec<CheckResult>,
    pub error: Option<StageError>,
}

/// Runs the pipeline and evaluates every predicate. Failures inside the
/// pipeline are reported, not returned.
pub fn run_scenario(s: &Scenario) -> ScenarioReport {
    let mut report = ScenarioReport {
        name: s.name.clone(),
        pipeline: s.pipeline.to_string(),
        passed: false,
        output: Value::Null,
        checks: Vec::new(),
        error: None,
    };
    match run_pipeline(s.pipeline, &s.params) {
        Ok(out) => report.output = out,
        Err(e) => {
            report.error = Some(StageError {
                stage: "pipeline".into(),
                message: e.to_string(),
            });
            return report;
        }
    }
    let mut all = true;
    for (key, p) in &s.expect {
        match p.eval(&report.output) {
            Ok((passed, actual, expected)) => {
                all &= passed;
                report.checks.push(CheckResult {
                    key: key.clone(),
                    predicate: p.clone(),
                    actual,
                    expected,
                    passed,
                });
            }
            Err(e) => {
                report.error = Some(StageError {
                    stage: format!("predicate {key}"),
                    message: e.to_string(),
                });
                return report;
            }
        }
    }
    report.passed = all;
    report
}

pub fn run_pipeline(p: Pipeline, params: &FlatConfig) -> Result<Value> {
    use Pipeline::*;
    match p {
        SpeculationIdentity => speculation_identity(params),
        FullCacheRatio => full_cache_ratio(params),
        AlphaSweep => alpha_sweep(params),
        PolicyOracle => policy_oracle(params),
        OptDominance => opt_dominance(params),
        PolicyCompare => policy_compare(params),
        MemoryFit => memory_fit(params),
        CompulsoryMisses => compulsory_misses(params),
        RenderConservation => render_conservation(params),
        RoundTrip => round_trip(params),
        Determinism => determinism(params),
    }
}

/// Parses `"1..20"` (inclusive) or `"1,5,9"`.
pub fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(Error::Config(format!("empty range {s:?}")));
        }
        return Ok((a..=b).collect());
    }
    let v: Vec<u64> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config(format!("empty list {s:?}")));
    }
    Ok(v)
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad list element {x:?} in {s:?}")))
        })
        .collect()
}

fn list_param<T: FromStr>(cfg: &FlatConfig, key: &str, default: &str) -> Result<Vec<T>> {
    parse_list(cfg.get_str(key).unwrap_or(default))
}

fn seeds_param(cfg: &FlatConfig, key: &str, default: &str) -> Result<Vec<u64>> {
    parse_u64_list(cfg.get_str(key).unwrap_or(default))
}

fn policies_param(cfg: &FlatConfig, default: &str) -> Result<Vec<PolicyKind>> {
    list_param(cfg, "policies", default)
}

fn ratio_json(r: crate::metrics::Ratio) -> Value {
    serde_json::to_value(r).unwrap_or(Value::Null)
}

fn speculation_identity(cfg: &FlatConfig) -> Result<Value> {
    let traces: u64 = cfg.get_or("traces", 1000)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let results: Vec<(bool, bool)> = (0..traces)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let e = rng.gen_range(1..=16);
            let shape = ModelShape::new(rng.gen_range(1..=6), e, rng.gen_range(1..=e))?;
            let t = random_speculation_trace(shape, rng.gen_range(0..=24), rng.gen())?;
            let m = speculation_metrics(&t);
            Ok((m.counts.fp == m.counts.fn_, m.precision == m.recall))
        })
        .collect::<Result<_>>()?;

    let toy_seeds = seeds_param(cfg, "toy_seeds", "1..5")?;
    let scales: Vec<f64> = list_param(cfg, "mixing_scales", "0,0.1,1")?;
    let toy_layers: usize = cfg.get_or("toy_layers", 8)?;
    let toy_tokens: usize = cfg.get_or("toy_tokens", 32)?;
    let mut toy = Vec::new();
    for &scale in &scales {
        for &s in &toy_seeds {
            let config = ToyModelConfig {
                shape: ModelShape::new(toy_layers, 8, 2)?,
                mixing_scale: scale,
                seed: s,
                num_tokens: toy_tokens,
                ..ToyModelConfig::default()
            };
            toy.push(config);
        }
    }
    let toy_results: Vec<(bool, bool)> = toy
        .par_iter()
        .map(|c| {
            let (_, spec) = run_model(c)?;
            let m = speculation_metrics(&spec);
            Ok((m.counts.fp == m.counts.fn_, m.precision == m.recall))
        })
        .collect::<Result<_>>()?;

    let count = |v: &[(bool, bool)], f: fn(&(bool, bool)) -> bool| v.iter().filter(|x| !f(x)).count();
    Ok(json!({
        "random_traces": traces,
        "toy_runs": toy.len(),
        "fp_fn_mismatches": count(&results, |x| x.0) + count(&toy_results, |x| x.0),
        "precision_recall_mismatches": count(&results, |x| x.1) + count(&toy_results, |x| x.1),
    }))
}

fn full_cache_ratio(cfg: &FlatConfig) -> Result<Value> {
    let pairs: Vec<String> = list_param(cfg, "pairs", "4:2,6:2,8:2,4:1")?;
    let layers: usize = cfg.get_or("layers", 2)?;
    let experts: usize = cfg.get_or("experts", 16)?;
    let tokens: usize = cfg.get_or("tokens", 200)?;
    let skew: f64 = cfg.get_or("skew", 1.0)?;
    let seed: u64 = cfg.get_or("seed", 7)?;
    let policies = policies_param(cfg, "lru,lfu,opt")?;
    let mut cases = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut min_steps = u64::MAX;
    for pair in &pairs {
        let (c, k) = pair
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected C:K, got {pair:?}")))?;
        let c: usize = c.parse().map_err(|_| Error::Config(format!("bad pair {pair:?}")))?;
        let k: usize = k.parse().map_err(|_| Error::Config(format!("bad pair {pair:?}")))?;
        let trace = gen_zipf(&ZipfParams::new(ModelShape::new(layers, experts, k)?, tokens, skew, seed))?;
        for &policy in &policies {
            let log = simulate(&trace, &SimConfig::new(policy, c))?;
            let full = cache_metrics(&log).full_cache;
            let expected = c as f64 / k as f64;
            let (rel, ratio) = match (full.precision.value(), full.recall.value()) {
                (Some(p), Some(r)) if p > 0.0 => {
                    let ratio = r / p;
                    (((ratio - expected) / expected).abs(), Value::from(ratio))
                }
                // no full-cache step with a hit: the identity says nothing
                _ => (f64::INFINITY, Value::Null),
            };
            max_rel_err = max_rel_err.max(rel);
            min_steps = min_steps.min(full.counts.steps);
            cases.push(json!({
                "cache_size": c,
                "top_k": k,
                "policy": policy.to_string(),
                "full_cache_steps": full.counts.steps,
                "precision": ratio_json(full.precision),
                "recall": ratio_json(full.recall),
                "ratio": ratio,
                "expected": expected,
                "rel_err": if rel.is_finite() { Value::from(rel) } else { Value::Null },
            }));
        }
    }
    Ok(json!({
        "cases": cases,
        "max_rel_err": if max_rel_err.is_finite() { Value::from(max_rel_err) } else { Value::Null },
        "min_full_cache_steps": if min_steps == u64::MAX { 0 } else { min_steps },
    }))
}

fn alpha_sweep(cfg: &FlatConfig) -> Result<Value> {
    let alphas: Vec<f64> = list_param(cfg, "alphas", "0,0.05,0.1,0.5,1.0")?;
    let seeds = seeds_param(cfg, "seeds", "1..10")?;
    let d = ToyModelConfig::default();
    let shape = ModelShape::new(
        cfg.get_or("layers", d.shape.num_layers)?,
        cfg.get_or("experts", d.shape.num_experts)?,
        cfg.get_or("top_k", d.shape.top_k)?,
    )?;
    let base = ToyModelConfig {
        shape,
        hidden_dim: cfg.get_or("hidden_dim", d.hidden_dim)?,
        num_tokens: cfg.get_or("tokens", d.num_tokens)?,
        skew: cfg.get_or("skew", d.skew)?,
        ..d
    };
    let runs: Vec<(usize, u64)> = (0..alphas.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let acc: Vec<f64> = runs
        .par_iter()
        .map(|&(a, s)| {
            let c = ToyModelConfig {
                mixing_scale: alphas[a],
                seed: s,
                ..base.clone()
            };
            let (_, spec) = run_model(&c)?;
            speculation_metrics(&spec)
                .precision
                .value()
                .ok_or_else(|| Error::Config("speculation trace is empty".into()))
        })
        .collect::<Result<_>>()?;
    let n = seeds.len();
    let means: Vec<f64> = acc.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let monotone_violations = means.windows(2).filter(|w| w[1] > w[0]).count();
    let zero_min = alphas
        .iter()
        .zip(acc.chunks(n))
        .filter(|(a, _)| **a == 0.0)
        .flat_map(|(_, c)| c.iter().copied())
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))));
    Ok(json!({
        "alphas": alphas,
        "seeds": seeds,
        "mean_accuracy": means,
        "alpha_zero_min_accuracy": zero_min,
        "monotone_violations": monotone_violations,
    }))
}

/// Straight-line LRU/LFU used as an oracle for the event logs. It keeps a
/// flat list of resident experts and scans it for the victim. Access
/// counts survive eviction.
mod reference {
    use super::*;

    pub struct RefStep {
        pub hits: Vec<u32>,
        pub misses: Vec<u32>,
        pub evicted: Vec<u32>,
        pub after: Vec<u32>,
    }

    pub fn run(policy: PolicyKind, cap: usize, sets: &[Vec<u32>]) -> Vec<RefStep> {
        let mut cache: Vec<u32> = Vec::new();
        let mut last: BTreeMap<u32, u64> = BTreeMap::new();
        let mut freq: BTreeMap<u32, f64> = BTreeMap::new();
        let mut out = Vec::new();
        for (t, set) in sets.iter().enumerate() {
            if let PolicyKind::LfuAged { decay_factor, decay_period } = policy {
                if t > 0 && (t as u64) % decay_period == 0 {
                    for f in freq.values_mut() {
                        *f *= decay_factor;
                    }
                }
            }
            let hits: Vec<u32> = set.iter().copied().filter(|id| cache.contains(id)).collect();
            let misses: Vec<u32> = set.iter().copied().filter(|id| !cache.contains(id)).collect();
            let mut evicted = Vec::new();
            for &id in &misses {
                if cache.len() == cap {
                    let key = |e: u32| {
                        let f = freq.get(&e).copied().unwrap_or(0.0);
                        let l = last.get(&e).copied().unwrap_or(0);
                        match policy {
                            PolicyKind::Lru => (0.0, l, e),
                            _ => (f, l, e),
                        }
                    };
                    let mut victim: Option<u32> = None;
                    for &e in &cache {
                        if set.contains(&e) {
                            continue;
                        }
                        let better = match victim {
                            None => true,
                            Some(v) => key(e).partial_cmp(&key(v)) == Some(std::cmp::Ordering::Less),
                        };
                        if better {
                            victim = Some(e);
                        }
                    }
                    let v = victim.expect("capacity below top_k");
                    cache.retain(|&e| e != v);
                    evicted.push(v);
                }
                cache.push(id);
            }
            for &id in set {
                last.insert(id, t as u64 + 1);
                *freq.entry(id).or_insert(0.0) += 1.0;
            }
            let mut after = cache.clone();
            after.sort_unstable();
            evicted.sort_unstable();
            out.push(RefStep { hits, misses, evicted, after });
        }
        out
    }
}

fn ids(s: &ExpertSet) -> Vec<u32> {
    s.iter().map(|e| e.0).collect()
}

fn matches_reference(outcome: &StepOutcome, r: &reference::RefStep) -> bool {
    ids(&outcome.hits) == r.hits
        && ids(&outcome.misses) == r.misses
        && ids(&outcome.evicted) == r.evicted
        && ids(&outcome.resident_after) == r.after
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<u32>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i as u32);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn policy_oracle(cfg: &FlatConfig) -> Result<Value> {
    let experts: usize = cfg.get_or("experts", 4)?;
    let top_k: usize = cfg.get_or("top_k", 1)?;
    let tokens: u32 = cfg.get_or("tokens", 6)?;
    let cache_sizes: Vec<usize> = list_param(cfg, "cache_sizes", "1,2,3,4")?;
    let policies = policies_param(cfg, "lru,lfu")?;
    let max_traces: u64 = cfg.get_or("max_traces", 1_000_000)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let shape = ModelShape::new(1, experts, top_k)?;
    let alphabet = subsets(experts, top_k);
    let total = (alphabet.len() as u64).checked_pow(tokens);
    let (enumerated, count) = match total {
        Some(n) if n <= max_traces => (true, n),
        _ => (false, max_traces),
    };
    let mismatches: u64 = (0..count)
        .into_par_iter()
        .map(|i| {
            let seq: Vec<Vec<u32>> = if enumerated {
                let mut x = i;
                (0..tokens)
                    .map(|_| {
                        let s = alphabet[(x % alphabet.len() as u64) as usize].clone();
                        x /= alphabet.len() as u64;
                        s
                    })
                    .collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
                (0..tokens)
                    .map(|_| alphabet[rng.gen_range(0..alphabet.len())].clone())
                    .collect()
            };
            let sets = seq
                .iter()
                .map(|s| vec![ExpertSet::collect_dedup(s.iter().map(|&e| ExpertId(e)))])
                .collect();
            let trace = ActivationTrace::from_sets(shape, sets)?;
            let mut bad = 0u64;
            for &c in cache_sizes.iter().filter(|&&c| c >= top_k) {
                for &p in &policies {
                    let log = simulate(&trace, &SimConfig::new(p, c))?;
                    let reference = reference::run(p, c, &seq);
                    let same = log.steps().len() == reference.len()
                        && log
                            .steps()
                            .iter()
                            .zip(&reference)
                            .all(|(s, r)| matches_reference(&s.outcome, r));
                    bad += u64::from(!same);
                }
            }
            Ok(bad)
        })
        .collect::<Result<Vec<u64>>>()?
        .into_iter()
        .sum();
    Ok(json!({
        "enumerated": enumerated,
        "traces": count,
        "cache_sizes": cache_sizes,
        "policies": policies.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "mismatches": mismatches,
    }))
}

fn random_zipf_trace(cfg: &FlatConfig, i: u64, defaults: (usize, usize, usize, usize)) -> Result<ActivationTrace> {
    let seed: u64 = cfg.get_or("seed", 0)?;
    let shape = ModelShape::new(
        cfg.get_or("layers", defaults.0)?,
        cfg.get_or("experts", defaults.1)?,
        cfg.get_or("top_k", defaults.2)?,
    )?;
    let skew: f64 = cfg.get_or("skew", 1.0)?;
    gen_zipf(&ZipfParams::new(shape, cfg.get_or("tokens", defaults.3)?, skew, seed.wrapping_add(i)))
}

fn total_hits(trace: &ActivationTrace, p: PolicyKind, c: usize) -> Result<u64> {
    Ok(cache_metrics(&simulate(trace, &SimConfig::new(p, c))?).total_hits)
}

fn opt_dominance(cfg: &FlatConfig) -> Result<Value> {
    let traces: u64 = cfg.get_or("traces", 100)?;
    let cache_sizes: Vec<usize> = list_param(cfg, "cache_sizes", "2,3,4")?;
    let rows: Vec<(i64, i64)> = (0..traces)
        .into_par_iter()
        .map(|i| {
            let trace = random_zipf_trace(cfg, i, (1, 8, 2, 64))?;
            let mut worst = (i64::MAX, i64::MAX);
            for &c in &cache_sizes {
                let opt = total_hits(&trace, PolicyKind::Opt, c)? as i64;
                let lru = total_hits(&trace, PolicyKind::Lru, c)? as i64;
                let lfu = total_hits(&trace, PolicyKind::Lfu, c)? as i64;
                worst = (worst.0.min(opt - lru), worst.1.min(opt - lfu));
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let violations = rows.iter().filter(|(a, b)| *a < 0 || *b < 0).count();
    Ok(json!({
        "instances": traces as usize * cache_sizes.len(),
        "violations": violations,
        "min_margin_over_lru": rows.iter().map(|r| r.0).min(),
        "min_margin_over_lfu": rows.iter().map(|r| r.1).min(),
    }))
}

fn policy_compare(cfg: &FlatConfig) -> Result<Value> {
    let policies = policies_param(cfg, "lru,lfu")?;
    let seeds = seeds_param(cfg, "seeds", "1..20")?;
    let model = cfg.get_str("model").unwrap_or("zipf").to_string();
    let shape = ModelShape::new(
        cfg.get_or("layers", 1)?,
        cfg.get_or("experts", 8)?,
        cfg.get_or("top_k", 2)?,
    )?;
    let tokens: usize = cfg.get_or("tokens", 512)?;
    let skew: f64 = cfg.get_or("skew", 1.0)?;
    let repeat_prob: f64 = cfg.get_or("repeat_prob", crate::tracegen::DEFAULT_REPEAT_PROB)?;
    let cache_size: usize = cfg.get_or("cache_size", 4)?;
    let warmup: usize = cfg.get_or("warmup", 0)?;
    let per_seed: Vec<BTreeMap<String, f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let base = ZipfParams::new(shape, tokens, skew, seed);
            let trace = match model.as_str() {
                "zipf" => gen_zipf(&base)?,
                "markov" => gen_markov(&MarkovParams { base, repeat_prob })?,
                other => return Err(Error::Config(format!("unknown model {other:?}"))),
            };
            policies
                .iter()
                .map(|&p| {
                    let log = simulate(&trace, &SimConfig::new(p, cache_size).with_warmup(warmup))?;
                    Ok((p.to_string(), crate::metrics::cache_metrics_with_warmup(&log, warmup).hit_rate))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut mean = BTreeMap::new();
    for p in &policies {
        let name = p.to_string();
        let m = per_seed.iter().map(|r| r[&name]).sum::<f64>() / seeds.len() as f64;
        mean.insert(name, m);
    }
    let rows: Vec<Value> = seeds
        .iter()
        .zip(&per_seed)
        .map(|(s, r)| json!({"seed": s, "hit_rate": r}))
        .collect();
    Ok(json!({
        "model": model,
        "cache_size": cache_size,
        "mean_hit_rate": mean,
        "per_seed": rows,
    }))
}

fn memory_fit(cfg: &FlatConfig) -> Result<Value> {
    let points = parse_memory_points(cfg.get_str("points").unwrap_or("4:11148.3,5:9145.8,6:7127.7"))?;
    let holdout: f64 = cfg.get_or("holdout", 5.0)?;
    let model = fit_memory_model(&points)?;
    let kept: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0 != holdout).collect();
    let observed = points
        .iter()
        .find(|p| p.0 == holdout)
        .map(|p| p.1)
        .ok_or_else(|| Error::Config(format!("no point at offloads = {holdout}")))?;
    let loo = fit_memory_model(&kept)?;
    let predicted = loo.predict(holdout);
    Ok(json!({
        "slope": model.slope_mb_per_offload,
        "intercept": model.intercept_mb,
        "residuals": model.residuals,
        "holdout": holdout,
        "loo_observed": observed,
        "loo_prediction": predicted,
        "loo_rel_err": ((predicted - observed) / observed).abs(),
    }))
}

fn compulsory_misses(cfg: &FlatConfig) -> Result<Value> {
    let traces: u64 = cfg.get_or("traces", 100)?;
    let policies = policies_param(cfg, "lru,lfu,lfu-aged,opt")?;
    let mismatches: usize = (0..traces)
        .into_par_iter()
        .map(|i| {
            let trace = random_zipf_trace(cfg, i, (2, 8, 2, 50))?;
            let shape = trace.shape();
            let mut bad = 0;
            for &p in &policies {
                let log = simulate(&trace, &SimConfig::new(p, shape.num_experts))?;
                let m = cache_metrics(&log);
                for layer in 0..shape.num_layers {
                    let distinct = ExpertSet::collect_dedup(
                        trace.layer_sets(layer).flat_map(|s| s.iter().collect::<Vec<_>>()),
                    )
                    .len() as u64;
                    bad += usize::from(m.per_layer[layer].summary.counts.misses != distinct);
                }
            }
            Ok(bad)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(json!({
        "traces": traces,
        "policies": policies.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "mismatches": mismatches,
    }))
}

fn count_class(svg: &str, class: &str) -> u64 {
    svg.matches(&format!("class=\"{class}\"")).count() as u64
}

fn render_conservation(cfg: &FlatConfig) -> Result<Value> {
    let logs: u64 = cfg.get_or("logs", 20)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let spec = RenderSpec {
        cell_px: cfg.get_or("cell_px", RenderSpec::default().cell_px)?,
        ..RenderSpec::default()
    };
    let policies = [PolicyKind::Lru, PolicyKind::Lfu, PolicyKind::lfu_aged_default(), PolicyKind::Opt];
    let rows: Vec<[u64; 4]> = (0..logs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let e = rng.gen_range(2..=16);
            let k = rng.gen_range(1..=e);
            let shape = ModelShape::new(rng.gen_range(1..=4), e, k)?;
            let tokens = rng.gen_range(0..=40);
            let trace = gen_zipf(&ZipfParams::new(shape, tokens, rng.gen_range(0.0..2.0), rng.gen()))?;
            let cache = rng.gen_range(k..=e);
            let log = simulate(&trace, &SimConfig::new(policies[(i % 4) as usize], cache))?;
            let mut bad = [0u64; 4];
            for layer in 0..shape.num_layers {
                let svg = render_cache_trace(&log, layer, &spec)?;
                let (mut a, mut s) = (0u64, 0u64);
                for step in log.layer_steps(layer) {
                    a += step.outcome.activated().len() as u64;
                    s += step.resident_before().len() as u64;
                }
                bad[0] += u64::from(count_class(&svg, "activated") != a);
                bad[1] += u64::from(count_class(&svg, "cached") != s);
            }
            let spec_trace = random_speculation_trace(ModelShape::new(shape.num_layers.max(2), e, k)?, 3, rng.gen())?;
            for token in 0..spec_trace.num_tokens() {
                let svg = render_speculation(&spec_trace, None, token, &spec)?;
                bad[2] += 1;
                bad[3] += u64::from(count_class(&svg, "fp") != count_class(&svg, "fn"));
            }
            Ok(bad)
        })
        .collect::<Result<_>>()?;
    let sum = |j: usize| rows.iter().map(|r| r[j]).sum::<u64>();
    Ok(json!({
        "logs": logs,
        "activated_mismatches": sum(0),
        "cached_mismatches": sum(1),
        "speculation_renders": sum(2),
        "fp_fn_mismatches": sum(3),
    }))
}

/// A random activation or speculation trace of random shape.
pub fn random_trace(seed: u64) -> Result<Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = rng.gen_range(1..=16);
    let shape = ModelShape::new(rng.gen_range(1..=5), e, rng.gen_range(1..=e))?;
    let tokens = rng.gen_range(0..=12);
    if rng.gen_bool(0.5) {
        let sets = (0..tokens)
            .map(|_| (0..shape.num_layers).map(|_| random_set(e, shape.top_k, &mut rng)).collect())
            .collect();
        Ok(ActivationTrace::from_sets(shape, sets)?.into())
    } else {
        Ok(random_speculation_trace(shape, tokens, rng.gen())?.into())
    }
}

fn round_trip(cfg: &FlatConfig) -> Result<Value> {
    let traces: u64 = cfg.get_or("traces", 1000)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let mismatches: usize = (0..traces)
        .into_par_iter()
        .map(|i| {
            let t = random_trace(seed.wrapping_add(i))?;
            let first = trace_to_string(&t);
            let back = read_trace(first.as_bytes())?;
            Ok(usize::from(back != t || trace_to_string(&back) != first))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(json!({"traces": traces, "mismatches": mismatches}))
}

/// gen-trace, simulate, metrics and render, with every artifact as text.
fn pipeline_artifacts(seed: u64, tokens: usize) -> Result<Vec<String>> {
    let shape = ModelShape::new(2, 8, 2)?;
    let trace = gen_zipf(&ZipfParams::new(shape, tokens, 1.0, seed))?;
    let trace_text = trace_to_string(&trace.into());
    let trace = match read_trace(trace_text.as_bytes())? {
        Trace::Activation(t) => t,
        Trace::Speculation(_) => return Err(Error::Config("expected an activation trace".into())),
    };
    let log = simulate(&trace, &SimConfig::new(PolicyKind::Lfu, 4))?;
    let metrics = serde_json::to_string_pretty(&cache_metrics(&log))
        .map_err(|e| Error::Config(e.to_string()))?;
    let svg = render_cache_trace(&log, 0, &RenderSpec::default())?;
    let toy = ToyModelConfig {
        shape: ModelShape::new(4, 8, 2)?,
        seed,
        num_tokens: tokens,
        ..ToyModelConfig::default()
    };
    let (act, spec) = run_model(&toy)?;
    Ok(vec![
        trace_text,
        event_log_to_string(&log),
        metrics,
        svg,
        trace_to_string(&act.into()),
        trace_to_string(&spec.into()),
    ])
}

fn determinism(cfg: &FlatConfig) -> Result<Value> {
    let runs: usize = cfg.get_or("runs", 2)?;
    let seed: u64 = cfg.get_or("seed", 42)?;
    let tokens: usize = cfg.get_or("tokens", 64)?;
    let outputs: Vec<Vec<String>> = (0..runs.max(1))
        .map(|_| pipeline_artifacts(seed, tokens))
        .collect::<Result<_>>()?;
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    Ok(json!({
        "runs": outputs.len(),
        "artifacts": outputs[0].len(),
        "identical": identical,
    }))
}
