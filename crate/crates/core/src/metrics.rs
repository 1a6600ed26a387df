//! Cache and speculation quality metrics, expert histograms and skew.
//!
//! Cache precision and recall treat the cache contents before a token as a
//! prediction of the token's experts. With `S_t` the resident set before
//! step `t` and `A_t` the activated set:
//!
//! ```text
//! precision = sum |S_t & A_t| / sum |S_t|
//! recall    = sum |S_t & A_t| / sum |A_t|
//! ```
//!
//! Once the cache is full, `|S_t| = C` and `|A_t| = K`, so
//! `recall = (C / K) * precision` on those steps.
//!
//! For speculation, every wrong guess is both a false positive (a guessed
//! expert that is not activated) and a false negative (an activated expert
//! that was not guessed), so `fp == fn` and precision equals recall.

use serde::{Serialize, Serializer};

use crate::sim::CacheEventLog;
use crate::trace::{ActivationTrace, SpeculationTrace};

/// A ratio whose denominator may be zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Value(f64),
    /// The denominator was zero.
    UndefinedEmpty,
}

impl Ratio {
    pub fn of(num: u64, den: u64) -> Self {
        if den == 0 {
            Ratio::UndefinedEmpty
        } else {
            Ratio::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(v),
            Ratio::UndefinedEmpty => None,
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Value(v) => s.serialize_f64(*v),
            Ratio::UndefinedEmpty => s.serialize_str("undefined-empty"),
        }
    }
}

/// Raw sums behind the cache metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheCounts {
    pub steps: u64,
    pub hits: u64,
    pub misses: u64,
    /// Sum of resident-set sizes before each step.
    pub cached: u64,
    /// Sum of activated-set sizes.
    pub activated: u64,
}

impl CacheCounts {
    fn add(&mut self, hits: usize, misses: usize, cached: usize) {
        self.steps += 1;
        self.hits += hits as u64;
        self.misses += misses as u64;
        self.cached += cached as u64;
        self.activated += (hits + misses) as u64;
    }

    /// Hits over lookups; 0 when there were none.
    pub fn hit_rate(&self) -> f64 {
        Ratio::of(self.hits, self.hits + self.misses)
            .value()
            .unwrap_or(0.0)
    }

    pub fn precision(&self) -> Ratio {
        Ratio::of(self.hits, self.cached)
    }

    pub fn recall(&self) -> Ratio {
        Ratio::of(self.hits, self.activated)
    }

    fn summary(&self) -> CacheSummary {
        CacheSummary {
            hit_rate: self.hit_rate(),
            precision: self.precision(),
            recall: self.recall(),
            counts: *self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheSummary {
    pub hit_rate: f64,
    pub precision: Ratio,
    pub recall: Ratio,
    #[serde(flatten)]
    pub counts: CacheCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCacheMetrics {
    pub layer: usize,
    #[serde(flatten)]
    pub summary: CacheSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheMetrics {
    pub hit_rate: f64,
    pub precision: Ratio,
    pub recall: Ratio,
    pub total_hits: u64,
    pub total_misses: u64,
    /// No steps remained after warmup exclusion.
    pub empty: bool,
    pub warmup_tokens: usize,
    pub totals: CacheCounts,
    /// The same sums restricted to steps that began with a full cache.
    pub full_cache: CacheSummary,
    pub per_layer: Vec<LayerCacheMetrics>,
}

/// Metrics over the log, excluding the warmup tokens from its config.
pub fn cache_metrics(log: &CacheEventLog) -> CacheMetrics {
    cache_metrics_with_warmup(log, log.config().warmup_tokens)
}

pub fn cache_metrics_with_warmup(log: &CacheEventLog, warmup_tokens: usize) -> CacheMetrics {
    let capacity = log.config().cache_size;
    let mut totals = CacheCounts::default();
    let mut full = CacheCounts::default();
    let mut per_layer: Vec<CacheCounts> = vec![CacheCounts::default(); log.layers().len()];
    for (i, step) in log.steps().iter().enumerate() {
        if step.token < warmup_tokens {
            continue;
        }
        let o = &step.outcome;
        let (h, m, c) = (o.hits.len(), o.misses.len(), o.resident_before.len());
        totals.add(h, m, c);
        per_layer[i % log.layers().len()].add(h, m, c);
        if c == capacity {
            full.add(h, m, c);
        }
    }
    CacheMetrics {
        hit_rate: totals.hit_rate(),
        precision: totals.precision(),
        recall: totals.recall(),
        total_hits: totals.hits,
        total_misses: totals.misses,
        empty: totals.steps == 0,
        warmup_tokens,
        totals,
        full_cache: full.summary(),
        per_layer: log
            .layers()
            .iter()
            .zip(per_layer)
            .map(|(&layer, c)| LayerCacheMetrics {
                layer,
                summary: c.summary(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SpeculationCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl SpeculationCounts {
    pub fn precision(&self) -> Ratio {
        Ratio::of(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Ratio {
        Ratio::of(self.tp, self.tp + self.fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpeculationMetrics {
    pub layer: usize,
    #[serde(flatten)]
    pub counts: SpeculationCounts,
    pub precision: Ratio,
    pub recall: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeculationMetrics {
    pub precision: Ratio,
    pub recall: Ratio,
    #[serde(flatten)]
    pub counts: SpeculationCounts,
    pub empty: bool,
    pub per_layer: Vec<LayerSpeculationMetrics>,
}

/// Counts true/false positives and false negatives over all records. Layer
/// 0 never appears in a speculation trace, so it is excluded by
/// construction.
pub fn speculation_metrics(trace: &SpeculationTrace) -> SpeculationMetrics {
    let layers = trace.shape().num_layers;
    let mut per_layer = vec![SpeculationCounts::default(); layers];
    for r in trace.records() {
        let tp = r.guessed.intersection_len(&r.actual) as u64;
        let c = &mut per_layer[r.layer];
        c.tp += tp;
        c.fp += r.guessed.len() as u64 - tp;
        c.fn_ += r.actual.len() as u64 - tp;
    }
    let mut counts = SpeculationCounts::default();
    for c in &per_layer[1.min(layers)..] {
        counts.tp += c.tp;
        counts.fp += c.fp;
        counts.fn_ += c.fn_;
    }
    SpeculationMetrics {
        precision: counts.precision(),
        recall: counts.recall(),
        counts,
        empty: trace.is_empty(),
        per_layer: per_layer
            .into_iter()
            .enumerate()
            .skip(1)
            .map(|(layer, c)| LayerSpeculationMetrics {
                layer,
                counts: c,
                precision: c.precision(),
                recall: c.recall(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertHistogram {
    pub layer: usize,
    pub counts: Vec<u64>,
    pub gini: f64,
    pub min_count: u64,
    pub max_count: u64,
}

/// Gini coefficient over ascending-sorted counts `c_1..c_n`:
/// `sum (2i - n - 1) c_i / (n * sum c_i)`. Zero when all counts are zero.
pub fn gini(counts: &[u64]) -> f64 {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let total: u64 = sorted.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| (2.0 * (i + 1) as f64 - n - 1.0) * c as f64)
        .sum();
    weighted / (n * total as f64)
}

pub fn expert_histograms(trace: &ActivationTrace) -> Vec<ExpertHistogram> {
    let shape = trace.shape();
    (0..shape.num_layers)
        .map(|layer| {
            let mut counts = vec![0u64; shape.num_experts];
            for set in trace.layer_sets(layer) {
                for e in set.iter() {
                    counts[e.index()] += 1;
                }
            }
            ExpertHistogram {
                layer,
                gini: gini(&counts),
                min_count: counts.iter().copied().min().unwrap_or(0),
                max_count: counts.iter().copied().max().unwrap_or(0),
                counts,
            }
        })
        .collect()
}

/// Fraction of activations (tokens after the first) whose expert was also
/// activated by the previous token at the same layer.
pub fn repeat_rate(trace: &ActivationTrace) -> Ratio {
    let mut repeated = 0u64;
    let mut total = 0u64;
    for layer in 0..trace.shape().num_layers {
        let sets: Vec<_> = trace.layer_sets(layer).collect();
        for w in sets.windows(2) {
            repeated += w[1].intersection_len(w[0]) as u64;
            total += w[1].len() as u64;
        }
    }
    Ratio::of(repeated, total)
}
