//! Synthetic activation traces.
//!
//! * [`gen_zipf`]: every `(token, layer)` independently draws `top_k`
//!   distinct experts with probability proportional to `rank^-s`, where
//!   each layer has its own random ranking of experts.
//! * [`gen_markov`]: adds temporal locality on top of a Zipf base. Each of
//!   the previous token's experts is kept with probability `repeat_prob`;
//!   free slots are filled from the base distribution.
//! * [`random_speculation_trace`]: independent uniform guesses and
//!   activations, for exercising the speculation metrics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trace::{ActivationTrace, ExpertId, ExpertSet, ModelShape, SpeculationRecord, SpeculationTrace};

pub const DEFAULT_REPEAT_PROB: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ZipfParams {
    pub shape: ModelShape,
    pub num_tokens: usize,
    /// Zipf exponent; 0 is uniform.
    pub skew_exponent: f64,
    /// Give each layer its own popularity ranking (otherwise rank = id).
    pub per_layer_permutation: bool,
    pub seed: u64,
}

impl ZipfParams {
    pub fn new(shape: ModelShape, num_tokens: usize, skew_exponent: f64, seed: u64) -> Self {
        ZipfParams {
            shape,
            num_tokens,
            skew_exponent,
            per_layer_permutation: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(self.skew_exponent >= 0.0 && self.skew_exponent.is_finite()) {
            return Err(Error::Config(format!(
                "skew exponent must be finite and non-negative, got {}",
                self.skew_exponent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovParams {
    pub base: ZipfParams,
    /// Probability that each expert of the previous token is re-selected.
    pub repeat_prob: f64,
}

impl MarkovParams {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return Err(Error::Config(format!(
                "repeat probability must be in [0, 1], got {}",
                self.repeat_prob
            )));
        }
        Ok(())
    }
}

/// Per-expert sampling weights for every layer: `weights[layer][expert]`.
pub fn zipf_weights(params: &ZipfParams, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let e = params.shape.num_experts;
    (0..params.shape.num_layers)
        .map(|_| {
            let mut ranking: Vec<usize> = (0..e).collect();
            if params.per_layer_permutation {
                ranking.shuffle(rng);
            }
            // ranking[r] is the expert holding rank r (0 = most popular)
            let mut w = vec![0.0; e];
            for (rank, &expert) in ranking.iter().enumerate() {
                w[expert] = ((rank + 1) as f64).powf(-params.skew_exponent);
            }
            w
        })
        .collect()
}

/// Draws `k` more distinct experts into `chosen`, one at a time, each
/// proportional to `weights` among the experts not yet chosen.
pub fn draw_without_replacement<R: Rng>(
    weights: &[f64],
    k: usize,
    chosen: &mut ExpertSet,
    rng: &mut R,
) {
    for _ in 0..k {
        let total: f64 = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(ExpertId::from(*i)))
            .map(|(_, w)| w)
            .sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if chosen.contains(ExpertId::from(i)) {
                continue;
            }
            pick = Some(i);
            if x < w {
                break;
            }
            x -= w;
        }
        // falls back to the last free expert if rounding overshoots
        chosen.insert(ExpertId::from(pick.expect("fewer free experts than slots")));
    }
}

pub fn gen_zipf(params: &ZipfParams) -> Result<ActivationTrace> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let weights = zipf_weights(params, &mut rng);
    let k = params.shape.top_k;
    let sets = (0..params.num_tokens)
        .map(|_| {
            weights
                .iter()
                .map(|w| {
                    let mut s = ExpertSet::new();
                    draw_without_replacement(w, k, &mut s, &mut rng);
                    s
                })
                .collect()
        })
        .collect();
    ActivationTrace::from_sets(params.shape, sets)
}

pub fn gen_markov(params: &MarkovParams) -> Result<ActivationTrace> {
    params.validate()?;
    let base = &params.base;
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let weights = zipf_weights(base, &mut rng);
    let k = base.shape.top_k;
    let mut prev: Vec<ExpertSet> = Vec::new();
    let mut sets = Vec::with_capacity(base.num_tokens);
    for token in 0..base.num_tokens {
        let row: Vec<ExpertSet> = weights
            .iter()
            .enumerate()
            .map(|(layer, w)| {
                let mut s = ExpertSet::new();
                if token > 0 {
                    for e in prev[layer].iter() {
                        if rng.gen::<f64>() < params.repeat_prob {
                            s.insert(e);
                        }
                    }
                }
                let free = k - s.len();
                draw_without_replacement(w, free, &mut s, &mut rng);
                s
            })
            .collect();
        prev = row.clone();
        sets.push(row);
    }
    ActivationTrace::from_sets(base.shape, sets)
}

/// A uniformly random `k`-subset of `0..n`.
pub fn random_set<R: Rng>(n: usize, k: usize, rng: &mut R) -> ExpertSet {
    ExpertSet::collect_dedup(rand::seq::index::sample(rng, n, k).into_iter().map(ExpertId::from))
}

/// Speculation trace whose guessed and actual sets are independent uniform
/// `top_k`-subsets.
pub fn random_speculation_trace(shape: ModelShape, num_tokens: usize, seed: u64) -> Result<SpeculationTrace> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (e, k) = (shape.num_experts, shape.top_k);
    let mut records = Vec::with_capacity(num_tokens * shape.num_layers.saturating_sub(1));
    for token in 0..num_tokens {
        for layer in 1..shape.num_layers {
            let guessed = random_set(e, k, &mut rng);
            let actual = random_set(e, k, &mut rng);
            records.push(SpeculationRecord { token, layer, guessed, actual });
        }
    }
    SpeculationTrace::new(shape, records)
}
