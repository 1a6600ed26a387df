//! Per-layer cache replay over an activation trace.
//!
//! Each layer owns an independent cache of `cache_size` experts. The replay
//! records, for every simulated `(token, layer)`, the cache contents before
//! the token arrived and what the policy did, so metrics, cost estimates and
//! figures never need to re-run a policy.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{warm_state, PolicyKind, StepOutcome};
use crate::trace::{
    numbered_lines, parse_line, write_json_line, ActivationTrace, ExpertId, ExpertSet, ModelShape,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub policy: PolicyKind,
    pub cache_size: usize,
    /// Leading tokens excluded from metrics (they are still simulated).
    pub warmup_tokens: usize,
    /// Layers to simulate; `None` means all of them.
    pub layers: Option<Vec<usize>>,
}

impl SimConfig {
    pub fn new(policy: PolicyKind, cache_size: usize) -> Self {
        SimConfig {
            policy,
            cache_size,
            warmup_tokens: 0,
            layers: None,
        }
    }

    pub fn with_warmup(mut self, tokens: usize) -> Self {
        self.warmup_tokens = tokens;
        self
    }

    pub fn with_layers(mut self, layers: Vec<usize>) -> Self {
        self.layers = Some(layers);
        self
    }

    /// Checks the configuration against a model shape and returns the
    /// sorted list of layers to simulate.
    pub fn resolve_layers(&self, shape: &ModelShape) -> Result<Vec<usize>> {
        self.policy.validate()?;
        if self.cache_size == 0 {
            return Err(Error::Config("cache size must be at least 1".into()));
        }
        if shape.top_k > self.cache_size {
            return Err(Error::Config(format!(
                "top_k={} exceeds cache size {}: the activated experts cannot all be resident",
                shape.top_k, self.cache_size
            )));
        }
        match &self.layers {
            None => Ok((0..shape.num_layers).collect()),
            Some(layers) => {
                let mut v = layers.clone();
                v.sort_unstable();
                v.dedup();
                if v.is_empty() {
                    return Err(Error::Config("layer selection is empty".into()));
                }
                if let Some(&bad) = v.iter().find(|&&l| l >= shape.num_layers) {
                    return Err(Error::Config(format!(
                        "layer {bad} out of range for num_layers={}",
                        shape.num_layers
                    )));
                }
                Ok(v)
            }
        }
    }
}

/// Translates "experts per layer kept off the accelerator" into a cache size.
pub fn offloads_to_cache_size(offloads_per_layer: usize, shape: &ModelShape) -> Result<usize> {
    if offloads_per_layer >= shape.num_experts {
        return Err(Error::Config(format!(
            "{offloads_per_layer} offloads per layer leaves no room in a layer of {} experts",
            shape.num_experts
        )));
    }
    Ok(shape.num_experts - offloads_per_layer)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimStep {
    pub token: usize,
    pub layer: usize,
    pub outcome: StepOutcome,
}

impl SimStep {
    pub fn resident_before(&self) -> &ExpertSet {
        &self.outcome.resident_before
    }
}

/// The full replay, ordered by `(token, layer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEventLog {
    config: SimConfig,
    shape: ModelShape,
    layers: Vec<usize>,
    steps: Vec<SimStep>,
}

impl CacheEventLog {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    /// Simulated layers, ascending.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn steps(&self) -> &[SimStep] {
        &self.steps
    }

    pub fn num_tokens(&self) -> usize {
        self.steps.len() / self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    /// Steps of one layer in token order.
    pub fn layer_steps(&self, layer: usize) -> impl Iterator<Item = &SimStep> + '_ {
        let stride = self.layers.len();
        let offset = self.layers.binary_search(&layer).ok();
        self.steps
            .iter()
            .skip(offset.unwrap_or(self.steps.len()))
            .step_by(stride)
    }
}

/// Replays the configured policy over every selected layer of `trace`.
///
/// Layers run in parallel; the result is identical to a sequential replay.
pub fn simulate(trace: &ActivationTrace, config: &SimConfig) -> Result<CacheEventLog> {
    let shape = trace.shape();
    let layers = config.resolve_layers(&shape)?;

    let per_layer: Vec<Vec<StepOutcome>> = layers
        .par_iter()
        .map(|&layer| simulate_layer(trace.layer_sets(layer).cloned().collect(), config))
        .collect::<Result<_>>()?;

    let num_tokens = trace.num_tokens();
    let mut columns: Vec<_> = per_layer.into_iter().map(Vec::into_iter).collect();
    let mut steps = Vec::with_capacity(num_tokens * layers.len());
    for token in 0..num_tokens {
        for (col, &layer) in columns.iter_mut().zip(&layers) {
            let outcome = col.next().expect("one outcome per token");
            steps.push(SimStep {
                token,
                layer,
                outcome,
            });
        }
    }

    Ok(CacheEventLog {
        config: config.clone(),
        shape,
        layers,
        steps,
    })
}

fn simulate_layer(sets: Vec<ExpertSet>, config: &SimConfig) -> Result<Vec<StepOutcome>> {
    let kind = config.policy;
    let mut state = warm_state(kind, config.cache_size)?;
    sets.iter()
        .enumerate()
        .map(|(t, a)| {
            let future = kind.needs_future().then(|| &sets[t + 1..]);
            state.step(kind, a, future)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventHeader {
    kind: String,
    policy: String,
    cache_size: usize,
    warmup_tokens: usize,
    num_layers: usize,
    num_experts: usize,
    top_k: usize,
    layers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventLine {
    t: usize,
    l: usize,
    cached: Vec<u32>,
    hit: Vec<u32>,
    miss: Vec<u32>,
    evict: Vec<u32>,
}

fn raw(set: &ExpertSet) -> Vec<u32> {
    set.iter().map(|e| e.0).collect()
}

/// Writes the event log as JSON Lines.
pub fn write_event_log<W: Write>(log: &CacheEventLog, mut out: W) -> Result<()> {
    let header = EventHeader {
        kind: "events".into(),
        policy: log.config.policy.to_string(),
        cache_size: log.config.cache_size,
        warmup_tokens: log.config.warmup_tokens,
        num_layers: log.shape.num_layers,
        num_experts: log.shape.num_experts,
        top_k: log.shape.top_k,
        layers: log.layers.clone(),
    };
    write_json_line(&mut out, &header)?;
    for s in &log.steps {
        let line = EventLine {
            t: s.token,
            l: s.layer,
            cached: raw(&s.outcome.resident_before),
            hit: raw(&s.outcome.hits),
            miss: raw(&s.outcome.misses),
            evict: raw(&s.outcome.evicted),
        };
        write_json_line(&mut out, &line)?;
    }
    out.flush().map_err(|e| Error::io("flushing event log", e))
}

pub fn event_log_to_string(log: &CacheEventLog) -> String {
    let mut buf = Vec::new();
    write_event_log(log, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("JSON output is UTF-8")
}

fn line_set(shape: &ModelShape, raw: Vec<u32>, what: &str, line: usize) -> Result<ExpertSet> {
    let set = ExpertSet::from_ids(raw.into_iter().map(ExpertId)).map_err(|dup| {
        Error::invalid(Some(line), format!("duplicate expert {dup} in {what}"))
    })?;
    if let Some(max) = set.largest() {
        if max.index() >= shape.num_experts {
            return Err(Error::invalid(
                Some(line),
                format!("expert {max} in {what} out of range"),
            ));
        }
    }
    Ok(set)
}

/// Reads an event log written by [`write_event_log`], checking that each
/// step is internally consistent and that consecutive steps of a layer chain
/// (`cached` of step t+1 equals the cache after step t).
pub fn read_event_log<R: BufRead>(source: R) -> Result<CacheEventLog> {
    let mut lines = numbered_lines(source);
    let (_, first) = lines.next().transpose()?.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let hdr: EventHeader = parse_line(&first, 1)?;
    if hdr.kind != "events" {
        return Err(Error::invalid(
            Some(1),
            format!("expected kind \"events\", found {:?}", hdr.kind),
        ));
    }
    let shape = ModelShape {
        num_layers: hdr.num_layers,
        num_experts: hdr.num_experts,
        top_k: hdr.top_k,
    };
    shape
        .validate()
        .map_err(|e| Error::invalid(Some(1), e.to_string()))?;
    let policy: PolicyKind = hdr
        .policy
        .parse()
        .map_err(|e: Error| Error::invalid(Some(1), e.to_string()))?;
    let config = SimConfig {
        policy,
        cache_size: hdr.cache_size,
        warmup_tokens: hdr.warmup_tokens,
        layers: Some(hdr.layers.clone()),
    };
    let layers = config
        .resolve_layers(&shape)
        .map_err(|e| Error::invalid(Some(1), e.to_string()))?;
    if layers != hdr.layers {
        return Err(Error::invalid(
            Some(1),
            "header layers must be ascending and distinct",
        ));
    }

    let mut steps = Vec::new();
    for item in lines {
        let (n, text) = item?;
        let ev: EventLine = parse_line(&text, n)?;
        let idx = steps.len();
        let want = (idx / layers.len(), layers[idx % layers.len()]);
        if (ev.t, ev.l) != want {
            return Err(Error::invalid(
                Some(n),
                format!(
                    "expected step for token {}, layer {}; found token {}, layer {}",
                    want.0, want.1, ev.t, ev.l
                ),
            ));
        }
        let cached = line_set(&shape, ev.cached, "cached", n)?;
        let hits = line_set(&shape, ev.hit, "hit", n)?;
        let misses = line_set(&shape, ev.miss, "miss", n)?;
        let evicted = line_set(&shape, ev.evict, "evict", n)?;
        let bad = |msg: &str| Err(Error::invalid(Some(n), msg.to_string()));
        if cached.len() > config.cache_size {
            return bad("cached set exceeds cache size");
        }
        if hits.len() + misses.len() != shape.top_k {
            return bad("hit and miss sets must together hold top_k experts");
        }
        if hits.intersection_len(&cached) != hits.len() {
            return bad("hit expert not cached");
        }
        if misses.intersection_len(&cached) != 0 {
            return bad("missed expert is cached");
        }
        if evicted.intersection_len(&cached) != evicted.len() || evicted.intersection_len(&hits) != 0
        {
            return bad("evicted experts must be cached and not hit");
        }
        let after = cached.difference(&evicted).union(&misses);
        if after.len() > config.cache_size {
            return bad("cache overflows after the step");
        }
        if idx >= layers.len() {
            let prev: &SimStep = &steps[idx - layers.len()];
            if prev.outcome.resident_after != cached {
                return bad("cached set does not follow from the previous step of this layer");
            }
        } else if !cached.is_empty() {
            return bad("caches start empty");
        }
        steps.push(SimStep {
            token: ev.t,
            layer: ev.l,
            outcome: StepOutcome {
                hits,
                loaded: misses.clone(),
                misses,
                evicted,
                resident_before: cached,
                resident_after: after,
            },
        });
    }
    if steps.len() % layers.len() != 0 {
        return Err(Error::invalid(None, "event log ends in the middle of a token"));
    }

    Ok(CacheEventLog {
        config,
        shape,
        layers,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> ExpertSet {
        ExpertSet::from_ids(ids.iter().map(|&i| ExpertId(i))).unwrap()
    }

    fn one_layer(e: usize, k: usize, sets: &[&[u32]]) -> ActivationTrace {
        let shape = ModelShape::new(1, e, k).unwrap();
        ActivationTrace::from_sets(shape, sets.iter().map(|s| vec![set(s)]).collect()).unwrap()
    }

    fn misses(log: &CacheEventLog) -> Vec<usize> {
        log.steps().iter().map(|s| s.outcome.misses.len()).collect()
    }

    #[test]
    fn constant_workload_hits_after_first_token() {
        let same: &[u32] = &[0, 1];
        let trace = one_layer(8, 2, &[same; 5]);
        let log = simulate(&trace, &SimConfig::new(PolicyKind::Lru, 4)).unwrap();
        assert_eq!(misses(&log), vec![2, 0, 0, 0, 0]);
        assert!(log.steps()[1..].iter().all(|s| s.outcome.hits.len() == 2));
    }

    #[test]
    fn thrashing_at_small_capacity() {
        let trace = one_layer(8, 2, &[&[0, 1], &[2, 3], &[0, 1]]);
        let log = simulate(&trace, &SimConfig::new(PolicyKind::Lru, 2)).unwrap();
        assert_eq!(misses(&log), vec![2, 2, 2]);
        let log = simulate(&trace, &SimConfig::new(PolicyKind::Lru, 4)).unwrap();
        assert_eq!(misses(&log), vec![2, 2, 0]);
    }

    #[test]
    fn k_above_capacity_is_rejected() {
        let trace = one_layer(8, 2, &[&[0, 1]]);
        assert!(matches!(
            simulate(&trace, &SimConfig::new(PolicyKind::Lru, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_trace_gives_empty_log() {
        let trace = ActivationTrace::new(ModelShape::default(), vec![]).unwrap();
        let log = simulate(&trace, &SimConfig::new(PolicyKind::Opt, 4)).unwrap();
        assert!(log.is_empty());
        assert_eq!(log.num_tokens(), 0);
    }

    #[test]
    fn offloads_map_to_cache_size() {
        let shape = ModelShape::default();
        assert_eq!(offloads_to_cache_size(4, &shape).unwrap(), 4);
        assert_eq!(offloads_to_cache_size(0, &shape).unwrap(), 8);
        assert_eq!(offloads_to_cache_size(6, &shape).unwrap(), 2);
        assert!(offloads_to_cache_size(8, &shape).is_err());
    }

    #[test]
    fn layer_subset_matches_full_run() {
        let shape = ModelShape::new(3, 4, 1).unwrap();
        let sets = (0..10u32)
            .map(|t| (0..3u32).map(|l| set(&[(t * (l + 1)) % 4])).collect())
            .collect();
        let trace = ActivationTrace::from_sets(shape, sets).unwrap();
        let full = simulate(&trace, &SimConfig::new(PolicyKind::Lfu, 2)).unwrap();
        let one = simulate(&trace, &SimConfig::new(PolicyKind::Lfu, 2).with_layers(vec![1])).unwrap();
        let a: Vec<_> = full.layer_steps(1).cloned().collect();
        let b: Vec<_> = one.steps().to_vec();
        assert_eq!(a, b);
        assert_eq!(one.layer_steps(0).count(), 0);
    }

    #[test]
    fn bad_layer_selection_is_rejected() {
        let trace = one_layer(4, 1, &[&[0]]);
        let cfg = SimConfig::new(PolicyKind::Lru, 2).with_layers(vec![1]);
        assert!(simulate(&trace, &cfg).is_err());
        let cfg = SimConfig::new(PolicyKind::Lru, 2).with_layers(vec![]);
        assert!(simulate(&trace, &cfg).is_err());
    }

    #[test]
    fn event_log_round_trip() {
        let trace = one_layer(8, 2, &[&[0, 1], &[2, 3], &[0, 1], &[1, 4]]);
        let log = simulate(&trace, &SimConfig::new(PolicyKind::Lru, 3).with_warmup(1)).unwrap();
        let text = event_log_to_string(&log);
        assert!(text.starts_with(
            "{\"kind\":\"events\",\"policy\":\"lru\",\"cache_size\":3,\"warmup_tokens\":1,"
        ));
        assert!(text.contains("{\"t\":1,\"l\":0,\"cached\":[0,1],\"hit\":[],\"miss\":[2,3],\"evict\":[0]}"));
        let back = read_event_log(text.as_bytes()).unwrap();
        assert_eq!(back.steps(), log.steps());
        assert_eq!(event_log_to_string(&back), text);
    }

    #[test]
    fn inconsistent_event_log_is_rejected() {
        let text = "{\"kind\":\"events\",\"policy\":\"lru\",\"cache_size\":2,\"warmup_tokens\":0,\"num_layers\":1,\"num_experts\":4,\"top_k\":1,\"layers\":[0]}\n\
                    {\"t\":0,\"l\":0,\"cached\":[],\"hit\":[],\"miss\":[1],\"evict\":[]}\n\
                    {\"t\":1,\"l\":0,\"cached\":[2],\"hit\":[2],\"miss\":[],\"evict\":[]}\n";
        let err = read_event_log(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation { line: Some(3), .. }), "{err}");
    }
}
