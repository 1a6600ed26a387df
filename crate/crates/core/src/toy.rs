//! A small seeded MoE forward pass used to produce realistic activation
//! traces and to exercise speculative next-layer expert prediction.
//!
//! Per layer `l`, starting from the residual stream `h`:
//!
//! ```text
//! h'    = h + alpha * M_l h                       (mixing, stands in for attention)
//! sel   = top_k(softmax(n(h')^T W_l + b_l))       (gating)
//! h_out = h' + sum_{e in sel} p_e * f_e(h')       (experts, f_e = W2 relu(W1 x))
//! ```
//!
//! `n` is RMS normalization of the gate input. The residual stream grows
//! from layer to layer; without it the deepest gates saturate.
//!
//! Because the stream is residual, layer `l+1`'s gate applied to `h_out`
//! of layer `l` is a good guess of what layer `l+1` will select. `alpha`
//! controls how far the mixing step moves the stream between the guess and
//! the real gating; at `alpha = 0` the guess is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::trace::{
    ActivationRecord, ActivationTrace, ExpertId, ExpertSet, ModelShape, SpeculationRecord,
    SpeculationTrace,
};

pub const DEFAULT_HIDDEN_DIM: usize = 16;
pub const DEFAULT_MIXING_SCALE: f64 = 0.1;
pub const DEFAULT_SKEW: f64 = 1.0;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_TOKENS: usize = 64;

/// Keys accepted in a flat config file for the toy model.
pub const CONFIG_KEYS: [&str; 8] = [
    "layers",
    "experts",
    "top_k",
    "hidden_dim",
    "mixing_scale",
    "skew",
    "seed",
    "tokens",
];

/// Expert feed-forward width as a multiple of `hidden_dim`.
const FFN_MULTIPLIER: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub shape: ModelShape,
    pub hidden_dim: usize,
    /// Scale of the per-layer mixing perturbation.
    pub mixing_scale: f64,
    /// Standard deviation of the per-layer gate bias; makes some experts
    /// systematically more popular than others.
    pub skew: f64,
    pub seed: u64,
    /// Number of input tokens. Inputs are i.i.d. standard normal vectors.
    pub num_tokens: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            shape: ModelShape::default(),
            hidden_dim: DEFAULT_HIDDEN_DIM,
            mixing_scale: DEFAULT_MIXING_SCALE,
            skew: DEFAULT_SKEW,
            seed: DEFAULT_SEED,
            num_tokens: DEFAULT_TOKENS,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if !(self.mixing_scale >= 0.0 && self.mixing_scale.is_finite()) {
            return Err(Error::Config(format!(
                "mixing_scale must be finite and non-negative, got {}",
                self.mixing_scale
            )));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(Error::Config(format!(
                "skew must be finite and non-negative, got {}",
                self.skew
            )));
        }
        Ok(())
    }

    /// Reads the toy-model keys from a flat config, falling back to the
    /// defaults for absent keys. Other keys are ignored.
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let d = ToyModelConfig::default();
        let c = ToyModelConfig {
            shape: ModelShape {
                num_layers: cfg.get_or("layers", d.shape.num_layers)?,
                num_experts: cfg.get_or("experts", d.shape.num_experts)?,
                top_k: cfg.get_or("top_k", d.shape.top_k)?,
            },
            hidden_dim: cfg.get_or("hidden_dim", d.hidden_dim)?,
            mixing_scale: cfg.get_or("mixing_scale", d.mixing_scale)?,
            skew: cfg.get_or("skew", d.skew)?,
            seed: cfg.get_or("seed", d.seed)?,
            num_tokens: cfg.get_or("tokens", d.num_tokens)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    fn random<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// A layer's router: logits are `h^T W + b` with `W` of shape
/// `[hidden_dim, num_experts]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork {
    weights: Matrix,
    bias: Vec<f64>,
}

impl GatingNetwork {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::Shape(format!(
                "gate bias has {} entries for {} experts",
                bias.len(),
                weights.cols()
            )));
        }
        if weights.data.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("gate weights must be finite".into()));
        }
        Ok(GatingNetwork { weights, bias })
    }

    /// A gate without bias.
    pub fn unbiased(weights: Matrix) -> Self {
        let bias = vec![0.0; weights.cols()];
        GatingNetwork { weights, bias }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.hidden_dim() {
            return Err(Error::Shape(format!(
                "hidden state of length {} does not match gate with hidden_dim {}",
                h.len(),
                self.hidden_dim()
            )));
        }
        let z: Vec<f64> = (0..self.num_experts())
            .map(|e| {
                self.bias[e]
                    + h.iter()
                        .enumerate()
                        .map(|(i, hi)| hi * self.weights.get(i, e))
                        .sum::<f64>()
            })
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("gate logits are not finite".into()));
        }
        Ok(z)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// Indices of the `k` largest probabilities, descending, lower index first
/// on ties.
pub fn top_k(probs: &[f64], k: usize) -> Vec<(ExpertId, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| (ExpertId::from(i), probs[i]))
        .collect()
}

/// Residual-stream vector, tagged with the layer that produced it (`None`
/// for a token's input embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub values: Vec<f64>,
    pub layer: Option<usize>,
}

impl HiddenState {
    pub fn input(values: Vec<f64>) -> Self {
        HiddenState {
            values,
            layer: None,
        }
    }
}

/// Softmax over the gate logits followed by top-k. Weights are the raw
/// softmax probabilities; they are not renormalized over the selection.
pub fn gate_select(h: &HiddenState, gate: &GatingNetwork, k: usize) -> Result<Vec<(ExpertId, f64)>> {
    if k == 0 || k > gate.num_experts() {
        return Err(Error::Config(format!(
            "top_k must be in [1, {}], got {k}",
            gate.num_experts()
        )));
    }
    let probs = softmax(&gate.logits(&h.values)?);
    Ok(top_k(&probs, k))
}

/// Guess of layer `l+1`'s experts from layer `l`'s output, made before
/// layer `l+1`'s mixing step runs.
pub fn speculate_next(h_out_prev: &HiddenState, gate_next: &GatingNetwork, k: usize) -> Result<ExpertSet> {
    let sel = gate_select(h_out_prev, gate_next, k)?;
    Ok(ExpertSet::collect_dedup(sel.into_iter().map(|(e, _)| e)))
}

/// RMS-normalizes a hidden state before it is fed to a gate. A zero vector
/// is returned unchanged.
pub fn gate_input(h: &HiddenState) -> HiddenState {
    let n = h.values.len().max(1) as f64;
    let rms = (h.values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let values = if rms > 0.0 {
        h.values.iter().map(|v| v / rms).collect()
    } else {
        h.values.clone()
    };
    HiddenState {
        values,
        layer: h.layer,
    }
}

/// Two-layer feed-forward expert `x -> W2 relu(W1 x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl Expert {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = self.w1.apply(x);
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        self.w2.apply(&hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub mixing: Matrix,
    pub gate: GatingNetwork,
    pub experts: Vec<Expert>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    layers: Vec<ToyLayer>,
}

impl ToyModel {
    /// Draws all weights from the config's seed.
    ///
    /// Draw order per layer: mixing matrix, gate weights, gate bias, then
    /// each expert's `W1` and `W2`.
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let e = config.shape.num_experts;
        let ffn = FFN_MULTIPLIER * d;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let inv_sqrt_ffn = 1.0 / (ffn as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = (0..config.shape.num_layers)
            .map(|_| {
                let mixing = Matrix::random(d, d, 1.0, &mut rng);
                let weights = Matrix::random(d, e, inv_sqrt_d, &mut rng);
                let bias = (0..e)
                    .map(|_| config.skew * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let experts = (0..e)
                    .map(|_| Expert {
                        w1: Matrix::random(ffn, d, inv_sqrt_d, &mut rng),
                        w2: Matrix::random(d, ffn, inv_sqrt_ffn, &mut rng),
                    })
                    .collect();
                ToyLayer {
                    mixing,
                    gate: GatingNetwork { weights, bias },
                    experts,
                }
            })
            .collect();
        Ok(ToyModel { config, layers })
    }

    /// Builds a model from explicit weights.
    pub fn from_parts(config: ToyModelConfig, layers: Vec<ToyLayer>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        if layers.len() != config.shape.num_layers {
            return Err(Error::Shape(format!(
                "{} layers given for num_layers={}",
                layers.len(),
                config.shape.num_layers
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            let ok = l.mixing.rows() == d
                && l.mixing.cols() == d
                && l.gate.hidden_dim() == d
                && l.gate.num_experts() == config.shape.num_experts
                && l.experts.len() == config.shape.num_experts
                && l.experts.iter().all(|x| {
                    x.w1.cols() == d && x.w2.rows() == d && x.w2.cols() == x.w1.rows()
                });
            if !ok {
                return Err(Error::Shape(format!("layer {i} weights do not match the config")));
            }
        }
        Ok(ToyModel { config, layers })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn layer(&self, l: usize) -> &ToyLayer {
        &self.layers[l]
    }

    /// The seeded input vectors, one per token.
    pub fn token_stream(&self) -> Vec<HiddenState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1);
        (0..self.config.num_tokens)
            .map(|_| {
                HiddenState::input(
                    (0..self.config.hidden_dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect()
    }

    /// Runs layer `layer` on `h_in`, returning its output and the activated
    /// experts.
    pub fn forward_token(&self, h_in: &HiddenState, layer: usize) -> Result<(HiddenState, ExpertSet)> {
        let l = self.layers.get(layer).ok_or_else(|| {
            Error::Selection(format!(
                "layer {layer} out of range for num_layers={}",
                self.layers.len()
            ))
        })?;
        if h_in.values.len() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "hidden state of length {} for hidden_dim {}",
                h_in.values.len(),
                self.config.hidden_dim
            )));
        }
        let alpha = self.config.mixing_scale;
        let mixed: Vec<f64> = if alpha == 0.0 {
            h_in.values.clone()
        } else {
            let m = l.mixing.apply(&h_in.values);
            h_in.values.iter().zip(&m).map(|(h, m)| h + alpha * m).collect()
        };
        let mixed = HiddenState {
            values: mixed,
            layer: Some(layer),
        };
        let selected = gate_select(&gate_input(&mixed), &l.gate, self.config.shape.top_k)?;
        let mut out = mixed.values.clone();
        for &(e, p) in &selected {
            let y = l.experts[e.index()].apply(&mixed.values);
            for (o, y) in out.iter_mut().zip(y) {
                *o += p * y;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("layer {layer} output is not finite")));
        }
        let activated = ExpertSet::collect_dedup(selected.into_iter().map(|(e, _)| e));
        Ok((
            HiddenState {
                values: out,
                layer: Some(layer),
            },
            activated,
        ))
    }

    /// Feeds every token through all layers, recording true activations
    /// and the speculative guess for every layer after the first.
    pub fn run(&self) -> Result<(ActivationTrace, SpeculationTrace)> {
        let shape = self.config.shape;
        let k = shape.top_k;
        let mut activations = Vec::with_capacity(self.config.num_tokens * shape.num_layers);
        let mut guesses = Vec::new();
        for (token, input) in self.token_stream().into_iter().enumerate() {
            let mut h = input;
            let mut guess: Option<ExpertSet> = None;
            for layer in 0..shape.num_layers {
                let (out, activated) = self.forward_token(&h, layer)?;
                if let Some(guessed) = guess.take() {
                    guesses.push(SpeculationRecord {
                        token,
                        layer,
                        guessed,
                        actual: activated.clone(),
                    });
                }
                if layer + 1 < shape.num_layers {
                    let next_gate = &self.layers[layer + 1].gate;
                    guess = Some(speculate_next(&gate_input(&out), next_gate, k)?);
                }
                activations.push(ActivationRecord {
                    token,
                    layer,
                    activated,
                });
                h = out;
            }
        }
        Ok((
            ActivationTrace::new(shape, activations)?,
            SpeculationTrace::new(shape, guesses)?,
        ))
    }
}

/// Builds the seeded model for `config` and runs it.
pub fn run_model(config: &ToyModelConfig) -> Result<(ActivationTrace, SpeculationTrace)> {
    ToyModel::new(config.clone())?.run()
}
