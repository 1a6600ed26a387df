//! Latency, transfer-volume and peak-memory estimates.
//!
//! Latency is a serial sum per simulated step: a fixed compute time plus
//! the time to move every missed expert over the host link, of which a
//! fraction `overlap` can be hidden behind compute.

use serde::Serialize;

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::metrics::Ratio;
use crate::sim::CacheEventLog;
use crate::trace::SpeculationTrace;

/// Roughly one 2-bit quantized Mixtral expert: peak memory drops by about
/// 2000 MB per offload, i.e. per expert in each of 32 layers.
pub const DEFAULT_EXPERT_BYTES: f64 = 63.0 * 1024.0 * 1024.0;
/// PCIe 4.0 x16, effective.
pub const DEFAULT_BANDWIDTH_BYTES_PER_S: f64 = 16.0e9;
pub const DEFAULT_COMPUTE_S_PER_LAYER: f64 = 1.0e-3;

/// Keys accepted in a flat config file for the cost model.
pub const CONFIG_KEYS: [&str; 4] = [
    "expert_bytes",
    "bandwidth_bytes_per_s",
    "compute_s_per_layer",
    "overlap",
];

/// Peak memory (MB) measured at 4, 5 and 6 offloads per layer on
/// Mixtral 8x7B with 2-bit experts.
pub const REFERENCE_PEAK_MEMORY_MB: [(f64, f64); 3] =
    [(4.0, 11148.3), (5.0, 9145.8), (6.0, 7127.7)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostParams {
    pub expert_bytes: f64,
    pub bandwidth_bytes_per_s: f64,
    pub compute_s_per_layer: f64,
    /// Fraction of transfer time hidden behind compute, in [0, 1].
    pub overlap: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            expert_bytes: DEFAULT_EXPERT_BYTES,
            bandwidth_bytes_per_s: DEFAULT_BANDWIDTH_BYTES_PER_S,
            compute_s_per_layer: DEFAULT_COMPUTE_S_PER_LAYER,
            overlap: 0.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.expert_bytes > 0.0 && self.expert_bytes.is_finite()) {
            return Err(Error::Config("expert_bytes must be positive".into()));
        }
        if !(self.bandwidth_bytes_per_s > 0.0 && self.bandwidth_bytes_per_s.is_finite()) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !(self.compute_s_per_layer >= 0.0 && self.compute_s_per_layer.is_finite()) {
            return Err(Error::Config("compute time must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap must be in [0, 1], got {}",
                self.overlap
            )));
        }
        Ok(())
    }

    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let d = CostParams::default();
        let p = CostParams {
            expert_bytes: cfg.get_or("expert_bytes", d.expert_bytes)?,
            bandwidth_bytes_per_s: cfg.get_or("bandwidth_bytes_per_s", d.bandwidth_bytes_per_s)?,
            compute_s_per_layer: cfg.get_or("compute_s_per_layer", d.compute_s_per_layer)?,
            overlap: cfg.get_or("overlap", d.overlap)?,
        };
        p.validate()?;
        Ok(p)
    }

    fn transfer_seconds(&self, experts: u64) -> f64 {
        (1.0 - self.overlap) * experts as f64 * self.expert_bytes / self.bandwidth_bytes_per_s
    }

    fn bytes(&self, experts: u64) -> u64 {
        (experts as f64 * self.expert_bytes).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyEstimate {
    pub num_tokens: usize,
    pub misses: u64,
    pub total_seconds: f64,
    pub seconds_per_token: Ratio,
    pub tokens_per_second: Ratio,
    pub bytes_transferred: u64,
}

/// Latency of one token given each layer's miss count:
/// `sum_l [compute + (1 - overlap) * misses_l * expert_bytes / bandwidth]`.
pub fn token_latency(params: &CostParams, misses_per_layer: &[u64]) -> f64 {
    misses_per_layer
        .iter()
        .map(|&m| params.compute_s_per_layer + params.transfer_seconds(m))
        .sum()
}

/// Decode latency of the replayed log. Every simulated step is counted,
/// including warmup tokens.
pub fn estimate_latency(log: &CacheEventLog, params: &CostParams) -> Result<LatencyEstimate> {
    params.validate()?;
    let num_tokens = log.num_tokens();
    let misses: u64 = log
        .steps()
        .iter()
        .map(|s| s.outcome.misses.len() as u64)
        .sum();
    let compute_per_token = log.layers().len() as f64 * params.compute_s_per_layer;
    let (seconds_per_token, tokens_per_second, total_seconds) = if num_tokens == 0 {
        (Ratio::UndefinedEmpty, Ratio::UndefinedEmpty, 0.0)
    } else {
        let per_token =
            compute_per_token + params.transfer_seconds(misses) / num_tokens as f64;
        let total = compute_per_token * num_tokens as f64 + params.transfer_seconds(misses);
        let tps = if per_token > 0.0 {
            Ratio::Value(1.0 / per_token)
        } else {
            Ratio::UndefinedEmpty
        };
        (Ratio::Value(per_token), tps, total)
    };
    Ok(LatencyEstimate {
        num_tokens,
        misses,
        total_seconds,
        seconds_per_token,
        tokens_per_second,
        bytes_transferred: params.bytes(misses),
    })
}

/// Transfer volume of speculative prefetching, ignoring cache reuse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpeculationCost {
    pub records: u64,
    /// Experts loaded on the guess.
    pub prefetched_experts: u64,
    /// Activated experts that were not guessed and had to be swapped in.
    pub corrective_experts: u64,
    pub transferred_experts: u64,
    /// Guessed experts that were not activated.
    pub wasted_experts: u64,
    pub bytes_transferred: u64,
    pub wasted_bytes: u64,
}

pub fn speculation_cost(spec: &SpeculationTrace, params: &CostParams) -> Result<SpeculationCost> {
    params.validate()?;
    let mut prefetched = 0u64;
    let mut corrective = 0u64;
    let mut wasted = 0u64;
    for r in spec.records() {
        prefetched += r.guessed.len() as u64;
        corrective += r.actual.difference(&r.guessed).len() as u64;
        wasted += r.guessed.difference(&r.actual).len() as u64;
    }
    let transferred = prefetched + corrective;
    Ok(SpeculationCost {
        records: spec.records().len() as u64,
        prefetched_experts: prefetched,
        corrective_experts: corrective,
        transferred_experts: transferred,
        wasted_experts: wasted,
        bytes_transferred: params.bytes(transferred),
        wasted_bytes: params.bytes(wasted),
    })
}

/// Least-squares line `peak_mb = intercept + slope * offloads`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryModel {
    pub intercept_mb: f64,
    pub slope_mb_per_offload: f64,
    /// `observed - predicted` for each fitted point, in input order.
    pub residuals: Vec<f64>,
}

impl MemoryModel {
    pub fn predict(&self, offloads: f64) -> f64 {
        self.intercept_mb + self.slope_mb_per_offload * offloads
    }
}

pub fn fit_memory_model(points: &[(f64, f64)]) -> Result<MemoryModel> {
    if points.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Fit("points must be finite".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all points share one offload value".into()));
    }
    let sxy: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residuals = points
        .iter()
        .map(|&(x, y)| y - (intercept + slope * x))
        .collect();
    Ok(MemoryModel {
        intercept_mb: intercept,
        slope_mb_per_offload: slope,
        residuals,
    })
}

pub fn estimate_peak_memory(model: &MemoryModel, offloads: usize) -> f64 {
    model.predict(offloads as f64)
}

/// Parses `"4:11148.3,5:9145.8"` into `(offloads, peak_mb)` pairs.
pub fn parse_memory_points(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (x, y) = p
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("expected <offloads>:<peak_mb>, got {p:?}")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {v:?} in {p:?}")))
            };
            Ok((parse(x)?, parse(y)?))
        })
        .collect()
}
