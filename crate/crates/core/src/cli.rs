//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on I/O or malformed input (and on failed
//! scenario predicates), 2 on usage and validation errors.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::FlatConfig;
use crate::cost::{
    estimate_latency, estimate_peak_memory, fit_memory_model, parse_memory_points, speculation_cost, CostParams,
    MemoryModel, REFERENCE_PEAK_MEMORY_MB,
};
use crate::error::{Error, Result};
use crate::metrics::{
    cache_metrics_with_warmup, expert_histograms, repeat_rate, speculation_metrics, CacheMetrics, Ratio,
};
use crate::policy::PolicyKind;
use crate::render::{
    cache_trace_text, render_cache_trace, render_histogram, render_speculation, speculation_text, RenderSpec,
};
use crate::scenario::{parse_u64_list, run_scenario, Scenario};
use crate::sim::{offloads_to_cache_size, read_event_log, simulate, write_event_log, SimConfig};
use crate::toy::{run_model, ToyModelConfig};
use crate::trace::{read_activation_trace, read_speculation_trace, write_trace, ActivationTrace, ModelShape, Trace};
use crate::tracegen::{gen_markov, gen_zipf, MarkovParams, ZipfParams, DEFAULT_REPEAT_PROB};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "moe-offload", version, about = "Trace-driven simulator for MoE expert offloading")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an activation trace (and a speculation trace for the toy model).
    GenTrace(GenTraceArgs),
    /// Replay a trace through one cache policy.
    Simulate(SimulateArgs),
    /// Run the toy model and report speculative-loading accuracy.
    Speculate(SpeculateArgs),
    /// Compute metrics from an event log, speculation trace or activation trace.
    Metrics(MetricsArgs),
    /// Estimate latency, transfer volume or peak memory.
    Cost(CostArgs),
    /// Draw an event log, speculation trace or histogram as SVG or text.
    Render(RenderArgs),
    /// Compare policies on one trace or a batch of generated traces.
    Compare(CompareArgs),
    /// Sweep cache sizes or offload counts.
    Sweep(SweepArgs),
    /// Run scenario files and report their predicates.
    Scenario(ScenarioArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Zipf,
    Markov,
    Toy,
}

/// Generator parameters shared by gen-trace, speculate and compare.
#[derive(Debug, Args, Default)]
pub struct GenFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Zipf exponent (zipf, markov) or gate-bias scale (toy).
    #[arg(long)]
    pub skew: Option<f64>,
    #[arg(long)]
    pub repeat_prob: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub mixing_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

const GEN_KEYS: [&str; 9] = [
    "layers",
    "experts",
    "top_k",
    "tokens",
    "skew",
    "repeat_prob",
    "hidden_dim",
    "mixing_scale",
    "seed",
];

impl GenFlags {
    fn merged(&self) -> Result<FlatConfig> {
        let mut cfg = match &self.config {
            Some(p) => FlatConfig::load(p)?,
            None => FlatConfig::default(),
        };
        cfg.ensure_known(&GEN_KEYS)?;
        macro_rules! put {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    cfg.set(stringify!($f), v);
                }
            )*};
        }
        put!(layers, experts, top_k, tokens, skew, repeat_prob, hidden_dim, mixing_scale, seed);
        Ok(cfg)
    }

    fn shape(cfg: &FlatConfig) -> Result<ModelShape> {
        let d = ModelShape::default();
        ModelShape::new(
            cfg.get_or("layers", d.num_layers)?,
            cfg.get_or("experts", d.num_experts)?,
            cfg.get_or("top_k", d.top_k)?,
        )
    }

    fn zipf(cfg: &FlatConfig) -> Result<ZipfParams> {
        Ok(ZipfParams::new(
            Self::shape(cfg)?,
            cfg.get_or("tokens", ToyModelConfig::default().num_tokens)?,
            cfg.get_or("skew", 1.0)?,
            cfg.get_or("seed", DEFAULT_SEED)?,
        ))
    }

    fn toy(cfg: &FlatConfig) -> Result<ToyModelConfig> {
        ToyModelConfig::from_flat(cfg)
    }

    fn activation_trace(cfg: &FlatConfig, model: Model) -> Result<ActivationTrace> {
        match model {
            Model::Zipf => gen_zipf(&Self::zipf(cfg)?),
            Model::Markov => gen_markov(&MarkovParams {
                base: Self::zipf(cfg)?,
                repeat_prob: cfg.get_or("repeat_prob", DEFAULT_REPEAT_PROB)?,
            }),
            Model::Toy => Ok(run_model(&Self::toy(cfg)?)?.0),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, value_enum)]
    pub model: Model,
    #[command(flatten)]
    pub gen: GenFlags,
    #[arg(long)]
    pub out: PathBuf,
    /// Speculation trace output; required for the toy model.
    #[arg(long)]
    pub out_spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "capacity", required = true, multiple = false, args = ["cache_size", "offloads"])]
pub struct CapacityFlags {
    /// Experts cached per layer.
    #[arg(long)]
    pub cache_size: Option<usize>,
    /// Experts per layer kept off the accelerator (cache size = experts - offloads).
    #[arg(long)]
    pub offloads: Option<usize>,
}

impl CapacityFlags {
    fn resolve(&self, shape: &ModelShape) -> Result<usize> {
        match (self.cache_size, self.offloads) {
            (Some(c), None) => Ok(c),
            (None, Some(o)) => offloads_to_cache_size(o, shape),
            _ => Err(Error::Config("give exactly one of --cache-size and --offloads".into())),
        }
    }
}

/// Cost-model flags; values override `--cost-config`.
#[derive(Debug, Args, Default)]
pub struct CostFlags {
    #[arg(long)]
    pub expert_bytes: Option<f64>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Seconds of compute per layer per token.
    #[arg(long)]
    pub compute: Option<f64>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub cost_config: Option<PathBuf>,
}

impl CostFlags {
    fn params(&self) -> Result<CostParams> {
        let mut cfg = match &self.cost_config {
            Some(p) => FlatConfig::load(p)?,
            None => FlatConfig::default(),
        };
        cfg.ensure_known(&crate::cost::CONFIG_KEYS)?;
        if let Some(v) = self.expert_bytes {
            cfg.set("expert_bytes", v);
        }
        if let Some(v) = self.bandwidth {
            cfg.set("bandwidth_bytes_per_s", v);
        }
        if let Some(v) = self.compute {
            cfg.set("compute_s_per_layer", v);
        }
        if let Some(v) = self.overlap {
            cfg.set("overlap", v);
        }
        CostParams::from_flat(&cfg)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value = "lru")]
    pub policy: PolicyKind,
    #[command(flatten)]
    pub capacity: CapacityFlags,
    /// Tokens excluded from the printed metrics.
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    /// Comma-separated layers to simulate (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Event log output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpeculateArgs {
    #[command(flatten)]
    pub gen: GenFlags,
    /// Sweep these mixing scales instead of a single run.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Seeds per mixing scale in a sweep, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_spec: Option<PathBuf>,
    #[command(flatten)]
    pub cost: CostFlags,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("metrics_input").required(true).multiple(false).args(["log", "spec", "histogram"])))]
pub struct MetricsArgs {
    /// Event log: cache hit rate, precision and recall.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Speculation trace: speculation precision and recall.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Activation trace: per-layer expert histograms and repeat rate.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Warmup tokens to exclude (default: the log's own warmup).
    #[arg(long)]
    pub warmup: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("cost_input").required(true).multiple(false).args(["log", "spec", "fit_memory"])))]
pub struct CostArgs {
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Points `offloads:peak_mb,...` to fit the linear memory model to.
    #[arg(long)]
    pub fit_memory: Option<String>,
    /// Offload counts to predict peak memory for.
    #[arg(long, value_delimiter = ',')]
    pub predict: Option<Vec<usize>>,
    #[command(flatten)]
    pub cost: CostFlags,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("render_input").required(true).multiple(false).args(["log", "spec", "histogram"])))]
pub struct RenderArgs {
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Activation trace to draw a histogram of.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Activation trace used to draw the first layer of a speculation figure.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub token: usize,
    #[arg(long, default_value_t = 12)]
    pub cell_px: u32,
    /// Plain-text grid instead of SVG.
    #[arg(long)]
    pub text: bool,
    /// Output file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Trace to compare on; without it, traces are generated.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "lru,lfu")]
    pub policies: Vec<PolicyKind>,
    #[command(flatten)]
    pub capacity: CapacityFlags,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    /// Number of generated traces, seeded from --seed upwards.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long, value_enum, default_value = "zipf")]
    pub model: Model,
    #[command(flatten)]
    pub gen: GenFlags,
    #[command(flatten)]
    pub cost: CostFlags,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("sweep_range").required(true).multiple(false).args(["cache_sizes", "offloads"])))]
pub struct SweepArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "lru,lfu,opt")]
    pub policies: Vec<PolicyKind>,
    /// Inclusive range `a..b` or a comma-separated list.
    #[arg(long)]
    pub cache_sizes: Option<String>,
    #[arg(long)]
    pub offloads: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    /// Memory points for the peak-memory column.
    #[arg(long)]
    pub fit_memory: Option<String>,
    #[command(flatten)]
    pub cost: CostFlags,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Report output (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Speculate(a) => speculate(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Cost(a) => cost_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Sweep(a) => sweep(a),
        Command::Scenario(a) => scenario_cmd(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_trace_file(trace: &Trace, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_trace(trace, &mut w)?;
    finish(w, path)
}

fn write_text(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes())
                .map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
            finish(w, p)
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| Error::io("writing standard output", e))
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Numeric(e.to_string()))?;
    s.push('\n');
    write_text(&s, None)
}

fn load_activations(path: &Path) -> Result<ActivationTrace> {
    read_activation_trace(open(path)?)
}

fn gen_trace(a: GenTraceArgs) -> Result<i32> {
    let cfg = a.gen.merged()?;
    if a.model == Model::Toy {
        let out_spec = a
            .out_spec
            .as_ref()
            .ok_or_else(|| Error::Config("--model toy needs --out-spec for the speculation trace".into()))?;
        let (act, spec) = run_model(&GenFlags::toy(&cfg)?)?;
        let summary = json!({
            "model": "toy",
            "out": a.out,
            "out_spec": out_spec,
            "tokens": act.num_tokens(),
            "activation_records": act.records().len(),
            "speculation_records": spec.records().len(),
        });
        write_trace_file(&act.into(), &a.out)?;
        write_trace_file(&spec.into(), out_spec)?;
        print_json(&summary)?;
        return Ok(0);
    }
    if a.out_spec.is_some() {
        return Err(Error::Config("--out-spec only applies to --model toy".into()));
    }
    let trace = GenFlags::activation_trace(&cfg, a.model)?;
    let summary = json!({
        "model": format!("{:?}", a.model).to_lowercase(),
        "out": a.out,
        "tokens": trace.num_tokens(),
        "activation_records": trace.records().len(),
    });
    write_trace_file(&trace.into(), &a.out)?;
    print_json(&summary)?;
    Ok(0)
}

fn simulate_cmd(a: SimulateArgs) -> Result<i32> {
    let trace = load_activations(&a.trace)?;
    let cache_size = a.capacity.resolve(&trace.shape())?;
    let mut config = SimConfig::new(a.policy, cache_size).with_warmup(a.warmup);
    if let Some(layers) = a.layers {
        config = config.with_layers(layers);
    }
    let log = simulate(&trace, &config)?;
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        write_event_log(&log, &mut w)?;
        finish(w, out)?;
    }
    print_json(&cache_metrics_with_warmup(&log, a.warmup))?;
    Ok(0)
}

fn speculate(a: SpeculateArgs) -> Result<i32> {
    let cfg = a.gen.merged()?;
    let base = GenFlags::toy(&cfg)?;
    let params = a.cost.params()?;
    if let Some(alphas) = a.alphas {
        if a.out.is_some() || a.out_spec.is_some() {
            return Err(Error::Config("--out/--out-spec cannot be used with --alphas".into()));
        }
        if a.seeds == 0 {
            return Err(Error::Config("--seeds must be at least 1".into()));
        }
        let runs: Vec<(f64, u64)> = alphas
            .iter()
            .flat_map(|&al| (0..a.seeds).map(move |i| (al, base.seed + i)))
            .collect();
        let acc: Vec<Option<f64>> = runs
            .par_iter()
            .map(|&(alpha, seed)| {
                let c = ToyModelConfig {
                    mixing_scale: alpha,
                    seed,
                    ..base.clone()
                };
                Ok(speculation_metrics(&run_model(&c)?.1).precision.value())
            })
            .collect::<Result<_>>()?;
        let rows: Vec<Value> = alphas
            .iter()
            .zip(acc.chunks(a.seeds as usize))
            .map(|(alpha, c)| {
                let vals: Vec<f64> = c.iter().flatten().copied().collect();
                let mean = if vals.is_empty() {
                    Value::from("undefined-empty")
                } else {
                    Value::from(vals.iter().sum::<f64>() / vals.len() as f64)
                };
                json!({"mixing_scale": alpha, "mean_accuracy": mean, "accuracy": c})
            })
            .collect();
        print_json(&json!({"seeds": a.seeds, "first_seed": base.seed, "curve": rows}))?;
        return Ok(0);
    }
    let (act, spec) = run_model(&base)?;
    let metrics = speculation_metrics(&spec);
    let cost = speculation_cost(&spec, &params)?;
    if let Some(p) = &a.out {
        write_trace_file(&act.into(), p)?;
    }
    if let Some(p) = &a.out_spec {
        write_trace_file(&spec.into(), p)?;
    }
    print_json(&json!({
        "mixing_scale": base.mixing_scale,
        "seed": base.seed,
        "accuracy": metrics.precision,
        "metrics": metrics,
        "cost": cost,
    }))?;
    Ok(0)
}

fn metrics_cmd(a: MetricsArgs) -> Result<i32> {
    if let Some(p) = &a.log {
        let log = read_event_log(open(p)?)?;
        let warmup = a.warmup.unwrap_or(log.config().warmup_tokens);
        print_json(&cache_metrics_with_warmup(&log, warmup))?;
    } else if let Some(p) = &a.spec {
        print_json(&speculation_metrics(&read_speculation_trace(open(p)?)?))?;
    } else if let Some(p) = &a.histogram {
        let trace = load_activations(p)?;
        print_json(&json!({
            "layers": expert_histograms(&trace),
            "repeat_rate": repeat_rate(&trace),
        }))?;
    }
    Ok(0)
}

fn memory_model(points: Option<&str>) -> Result<MemoryModel> {
    match points {
        Some(s) => fit_memory_model(&parse_memory_points(s)?),
        None => fit_memory_model(&REFERENCE_PEAK_MEMORY_MB),
    }
}

fn cost_cmd(a: CostArgs) -> Result<i32> {
    if let Some(points) = &a.fit_memory {
        let model = memory_model(Some(points))?;
        let predictions: Vec<Value> = a
            .predict
            .iter()
            .flatten()
            .map(|&o| json!({"offloads": o, "peak_memory_mb": estimate_peak_memory(&model, o)}))
            .collect();
        print_json(&json!({"model": model, "predictions": predictions}))?;
        return Ok(0);
    }
    let params = a.cost.params()?;
    if let Some(p) = &a.log {
        let log = read_event_log(open(p)?)?;
        print_json(&json!({"params": params, "latency": estimate_latency(&log, &params)?}))?;
    } else if let Some(p) = &a.spec {
        let spec = read_speculation_trace(open(p)?)?;
        print_json(&json!({"params": params, "speculation": speculation_cost(&spec, &params)?}))?;
    }
    Ok(0)
}

fn render_cmd(a: RenderArgs) -> Result<i32> {
    let spec = RenderSpec {
        cell_px: a.cell_px,
        ..RenderSpec::default()
    };
    let doc = if let Some(p) = &a.log {
        let log = read_event_log(open(p)?)?;
        if a.text {
            cache_trace_text(&log, a.layer)?
        } else {
            render_cache_trace(&log, a.layer, &spec)?
        }
    } else if let Some(p) = &a.spec {
        let trace = read_speculation_trace(open(p)?)?;
        let act = a.activations.as_deref().map(load_activations).transpose()?;
        if a.text {
            speculation_text(&trace, act.as_ref(), a.token)?
        } else {
            render_speculation(&trace, act.as_ref(), a.token, &spec)?
        }
    } else if let Some(p) = &a.histogram {
        let trace = load_activations(p)?;
        let hist = expert_histograms(&trace);
        let h = hist
            .get(a.layer)
            .ok_or_else(|| Error::Selection(format!("layer {} not in trace", a.layer)))?;
        render_histogram(h, &spec)?
    } else {
        unreachable!("clap requires one input")
    };
    write_text(&doc, a.out.as_deref())?;
    Ok(0)
}

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    policy: String,
    hit_rate: f64,
    precision: Ratio,
    recall: Ratio,
    tokens_per_second: Ratio,
}

fn evaluate(
    trace: &ActivationTrace,
    policy: PolicyKind,
    cache_size: usize,
    warmup: usize,
    params: &CostParams,
) -> Result<(CacheMetrics, Ratio)> {
    let log = simulate(trace, &SimConfig::new(policy, cache_size).with_warmup(warmup))?;
    let tps = estimate_latency(&log, params)?.tokens_per_second;
    Ok((cache_metrics_with_warmup(&log, warmup), tps))
}

fn mean_ratio(v: &[Ratio]) -> Ratio {
    let vals: Vec<f64> = v.iter().filter_map(|r| r.value()).collect();
    if vals.is_empty() {
        Ratio::UndefinedEmpty
    } else {
        Ratio::Value(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn fmt_ratio(r: Ratio) -> String {
    match r.value() {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

fn compare(a: CompareArgs) -> Result<i32> {
    let params = a.cost.params()?;
    let traces: Vec<(Option<u64>, ActivationTrace)> = match (&a.trace, a.seeds) {
        (Some(_), Some(_)) => return Err(Error::Config("--trace and --seeds are exclusive".into())),
        (Some(p), None) => vec![(None, load_activations(p)?)],
        (None, n) => {
            let n = n.unwrap_or(1);
            if n == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let mut cfg = a.gen.merged()?;
            let first: u64 = cfg.get_or("seed", DEFAULT_SEED)?;
            let mut out = Vec::new();
            for s in first..first + n {
                cfg.set("seed", s);
                out.push((Some(s), GenFlags::activation_trace(&cfg, a.model)?));
            }
            out
        }
    };
    let cache_size = a.capacity.resolve(&traces[0].1.shape())?;
    // per trace, per policy
    let results: Vec<Vec<(CacheMetrics, Ratio)>> = traces
        .par_iter()
        .map(|(_, t)| {
            a.policies
                .iter()
                .map(|&p| evaluate(t, p, cache_size, a.warmup, &params))
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CompareRow> = a
        .policies
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let col: Vec<&(CacheMetrics, Ratio)> = results.iter().map(|r| &r[i]).collect();
            let n = col.len() as f64;
            CompareRow {
                policy: p.to_string(),
                hit_rate: col.iter().map(|c| c.0.hit_rate).sum::<f64>() / n,
                precision: mean_ratio(&col.iter().map(|c| c.0.precision).collect::<Vec<_>>()),
                recall: mean_ratio(&col.iter().map(|c| c.0.recall).collect::<Vec<_>>()),
                tokens_per_second: mean_ratio(&col.iter().map(|c| c.1).collect::<Vec<_>>()),
            }
        })
        .collect();
    if a.json {
        let per_trace: Vec<Value> = traces
            .iter()
            .zip(&results)
            .map(|((seed, _), r)| {
                let hit: serde_json::Map<String, Value> = a
                    .policies
                    .iter()
                    .zip(r)
                    .map(|(p, m)| (p.to_string(), Value::from(m.0.hit_rate)))
                    .collect();
                json!({"seed": seed, "hit_rate": hit})
            })
            .collect();
        print_json(&json!({
            "cache_size": cache_size,
            "warmup_tokens": a.warmup,
            "traces": traces.len(),
            "cost_params": params,
            "rows": rows,
            "per_trace": per_trace,
        }))?;
    } else {
        let mut s = format!(
            "{:<16} {:>9} {:>10} {:>9} {:>12}\n",
            "policy", "hit_rate", "precision", "recall", "tokens/sec"
        );
        for r in &rows {
            s.push_str(&format!(
                "{:<16} {:>9.4} {:>10} {:>9} {:>12}\n",
                r.policy,
                r.hit_rate,
                fmt_ratio(r.precision),
                fmt_ratio(r.recall),
                r.tokens_per_second.value().map_or("-".into(), |v| format!("{v:.3}")),
            ));
        }
        write_text(&s, None)?;
    }
    Ok(0)
}

fn parse_range(s: &str) -> Result<Vec<usize>> {
    Ok(parse_u64_list(s)?.into_iter().map(|v| v as usize).collect())
}

fn sweep(a: SweepArgs) -> Result<i32> {
    let trace = load_activations(&a.trace)?;
    let shape = trace.shape();
    let params = a.cost.params()?;
    let model = memory_model(a.fit_memory.as_deref())?;
    let sizes: Vec<(usize, usize)> = match (&a.cache_sizes, &a.offloads) {
        (Some(r), None) => parse_range(r)?
            .into_iter()
            .map(|c| (c, shape.num_experts.saturating_sub(c)))
            .collect(),
        (None, Some(r)) => parse_range(r)?
            .into_iter()
            .map(|o| Ok((offloads_to_cache_size(o, &shape)?, o)))
            .collect::<Result<_>>()?,
        _ => return Err(Error::Config("give exactly one of --cache-sizes and --offloads".into())),
    };
    let configs: Vec<(usize, usize, PolicyKind)> = sizes
        .iter()
        .flat_map(|&(c, o)| a.policies.iter().map(move |&p| (c, o, p)))
        .collect();
    let rows: Vec<Value> = configs
        .par_iter()
        .map(|&(c, o, p)| {
            let (m, tps) = evaluate(&trace, p, c, a.warmup, &params)?;
            Ok(json!({
                "cache_size": c,
                "offloads": o,
                "policy": p.to_string(),
                "hit_rate": m.hit_rate,
                "precision": m.precision,
                "recall": m.recall,
                "tokens_per_second": tps,
                "peak_memory_mb": estimate_peak_memory(&model, o),
            }))
        })
        .collect::<Result<_>>()?;
    print_json(&json!({
        "warmup_tokens": a.warmup,
        "memory_model": model,
        "rows": rows,
    }))?;
    Ok(0)
}

fn scenario_cmd(a: ScenarioArgs) -> Result<i32> {
    let scenarios: Vec<Scenario> = a.files.iter().map(|p| Scenario::load(p)).collect::<Result<_>>()?;
    let reports: Vec<_> = scenarios.par_iter().map(run_scenario).collect();
    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        eprintln!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.name);
    }
    let mut s = serde_json::to_string_pretty(&json!({"passed": passed, "scenarios": reports}))
        .map_err(|e| Error::Numeric(e.to_string()))?;
    s.push('\n');
    write_text(&s, a.out.as_deref())?;
    Ok(if passed { 0 } else { 1 })
}
