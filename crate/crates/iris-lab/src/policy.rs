//! The toy autoregressive policy: token embeddings, a pooled prompt feature,
//! one tanh hidden layer, and a full-vocabulary output head that is masked per
//! segment. Gradients are exact analytic reverse mode.

use crate::domain::{Prompt, Segment, Vocabulary};
use crate::numerics::{masked_softmax, CategoricalDist, RngStream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context length must be {expected}, got {got}")]
    ContextLength { expected: usize, got: usize },
    #[error("segment violation at position {0}")]
    SegmentViolation(usize),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Embedding width.
    pub d: usize,
    /// Context window (generated tokens fed to the trunk, pad-left).
    pub k: usize,
    /// Hidden width.
    pub h: usize,
    /// Half-width of the uniform weight init.
    pub init_scale: f64,
    /// Full vocabulary size.
    pub vocab_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d: 16,
            k: 8,
            h: 64,
            init_scale: 0.08,
            vocab_size: Vocabulary::default().full_size(),
        }
    }
}

impl PolicyConfig {
    /// Config used by the gradient checker: small enough that central finite
    /// differences over every parameter stay fast.
    pub fn grad_check() -> Self {
        PolicyConfig {
            d: 4,
            k: 2,
            h: 8,
            init_scale: 0.08,
            vocab_size: Vocabulary::default().full_size(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.k * self.d + self.d
    }

    pub fn param_count(&self) -> usize {
        self.vocab_size * self.d
            + self.d * self.d
            + self.input_dim() * self.h
            + self.h
            + self.h * self.vocab_size
            + self.vocab_size
    }
}

/// All learnable parameters. Matrices are stored row-major as flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    /// vocab x d
    pub token_embeddings: Vec<f64>,
    /// d x d
    pub prompt_pool_weights: Vec<f64>,
    /// (k d + d) x h
    pub hidden_weights: Vec<f64>,
    /// h
    pub hidden_bias: Vec<f64>,
    /// h x vocab
    pub output_weights: Vec<f64>,
    /// vocab
    pub output_bias: Vec<f64>,
}

/// Names and shapes of the parameter tensors, in canonical order.
pub const TENSOR_NAMES: [&str; 6] = [
    "token_embeddings",
    "prompt_pool_weights",
    "hidden_weights",
    "hidden_bias",
    "output_weights",
    "output_bias",
];

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        let input_dim = config.input_dim();
        PolicyParams {
            token_embeddings: vec![0.0; config.vocab_size * config.d],
            prompt_pool_weights: vec![0.0; config.d * config.d],
            hidden_weights: vec![0.0; input_dim * config.h],
            hidden_bias: vec![0.0; config.h],
            output_weights: vec![0.0; config.h * config.vocab_size],
            output_bias: vec![0.0; config.vocab_size],
            config,
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.token_embeddings,
            &self.prompt_pool_weights,
            &self.hidden_weights,
            &self.hidden_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.token_embeddings,
            &mut self.prompt_pool_weights,
            &mut self.hidden_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }

    pub fn tensor_shape(&self, name: &str) -> Vec<usize> {
        let c = &self.config;
        match name {
            "token_embeddings" => vec![c.vocab_size, c.d],
            "prompt_pool_weights" => vec![c.d, c.d],
            "hidden_weights" => vec![c.input_dim(), c.h],
            "hidden_bias" => vec![c.h],
            "output_weights" => vec![c.h, c.vocab_size],
            "output_bias" => vec![c.vocab_size],
            _ => panic!("unknown tensor {name}"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Content hash over the canonical 64-bit encoding of every tensor.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for &x in t.iter() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Flat view of every parameter, in canonical tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut i = idx;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }
}

/// Gradient accumulator with the same layout as [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct PolicyGrads {
    pub token_embeddings: Vec<f64>,
    pub prompt_pool_weights: Vec<f64>,
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl PolicyGrads {
    pub fn zeros(config: &PolicyConfig) -> Self {
        PolicyGrads {
            token_embeddings: vec![0.0; config.vocab_size * config.d],
            prompt_pool_weights: vec![0.0; config.d * config.d],
            hidden_weights: vec![0.0; config.input_dim() * config.h],
            hidden_bias: vec![0.0; config.h],
            output_weights: vec![0.0; config.h * config.vocab_size],
            output_bias: vec![0.0; config.vocab_size],
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.token_embeddings,
            &self.prompt_pool_weights,
            &self.hidden_weights,
            &self.hidden_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.token_embeddings,
            &mut self.prompt_pool_weights,
            &mut self.hidden_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }

    pub fn add_scaled(&mut self, other: &PolicyGrads, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }
}

/// Weights uniform in [-init_scale, +init_scale], biases zero.
pub fn init_params(stream: RngStream, config: PolicyConfig) -> PolicyParams {
    let mut rng = stream.rng();
    let mut params = PolicyParams::zeros(config);
    let s = params.config.init_scale;
    for t in [
        &mut params.token_embeddings,
        &mut params.prompt_pool_weights,
        &mut params.hidden_weights,
        &mut params.output_weights,
    ] {
        for x in t.iter_mut() {
            *x = rng.gen_range(-s..=s);
        }
    }
    params
}

/// Cached intermediate state of one forward pass, consumed by the backward
/// pass for the same position.
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub mean_prompt_embedding: Vec<f64>,
    pub dist: CategoricalDist,
}

fn prompt_feature(params: &PolicyParams, prompt: &Prompt) -> (Vec<f64>, Vec<f64>) {
    let d = params.config.d;
    let n = prompt.tokens.len() as f64;
    let mut mean = vec![0.0; d];
    for &t in &prompt.tokens {
        let row = &params.token_embeddings[t as usize * d..(t as usize + 1) * d];
        for (m, e) in mean.iter_mut().zip(row) {
            *m += e / n;
        }
    }
    // feat = mean_emb . W_pool
    let mut feat = vec![0.0; d];
    for i in 0..d {
        let mi = mean[i];
        if mi == 0.0 {
            continue;
        }
        let row = &params.prompt_pool_weights[i * d..(i + 1) * d];
        for (f, w) in feat.iter_mut().zip(row) {
            *f += mi * w;
        }
    }
    (mean, feat)
}

/// One next-token distribution, keeping the trace needed for backprop.
pub fn forward_traced(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &Prompt,
    context: &[u32],
    segment: Segment,
) -> Result<ForwardTrace, PolicyError> {
    let c = &params.config;
    if context.len() != c.k {
        return Err(PolicyError::ContextLength {
            expected: c.k,
            got: context.len(),
        });
    }
    let (mean, feat) = prompt_feature(params, prompt);
    let mut input = Vec::with_capacity(c.input_dim());
    for &t in context {
        input.extend_from_slice(&params.token_embeddings[t as usize * c.d..(t as usize + 1) * c.d]);
    }
    input.extend_from_slice(&feat);

    let mut hidden = params.hidden_bias.clone();
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &params.hidden_weights[i * c.h..(i + 1) * c.h];
        for (hv, w) in hidden.iter_mut().zip(row) {
            *hv += x * w;
        }
    }
    for hv in hidden.iter_mut() {
        *hv = hv.tanh();
    }

    let mut logits = params.output_bias.clone();
    for (j, &hv) in hidden.iter().enumerate() {
        let row = &params.output_weights[j * c.vocab_size..(j + 1) * c.vocab_size];
        for (lv, w) in logits.iter_mut().zip(row) {
            *lv += hv * w;
        }
    }

    let dist = masked_softmax(&logits, &vocab.active_set(segment)).expect("finite logits");
    Ok(ForwardTrace {
        input,
        hidden,
        mean_prompt_embedding: mean,
        dist,
    })
}

/// Next-token distribution for the given context and segment.
pub fn forward(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &Prompt,
    context: &[u32],
    segment: Segment,
) -> Result<CategoricalDist, PolicyError> {
    forward_traced(params, vocab, prompt, context, segment).map(|t| t.dist)
}

/// Accumulate into `grads` the gradient of a scalar loss whose derivative
/// w.r.t. the active-set logits at this position is `logit_grad`.
///
/// `logit_grad[i]` corresponds to `trace.dist.active_ids[i]`. Accumulation
/// order is fixed (output layer, hidden layer, embeddings, prompt pooling).
pub fn backward_position(
    params: &PolicyParams,
    prompt: &Prompt,
    context: &[u32],
    trace: &ForwardTrace,
    logit_grad: &[f64],
    grads: &mut PolicyGrads,
) {
    let c = &params.config;
    // scatter active-set logit grads to the full vocabulary
    let mut dz = vec![0.0; c.vocab_size];
    for (&id, &g) in trace.dist.active_ids.iter().zip(logit_grad) {
        dz[id as usize] = g;
    }

    let mut dhidden = vec![0.0; c.h];
    for (j, &hv) in trace.hidden.iter().enumerate() {
        let wrow = &params.output_weights[j * c.vocab_size..(j + 1) * c.vocab_size];
        let grow = &mut grads.output_weights[j * c.vocab_size..(j + 1) * c.vocab_size];
        let mut acc = 0.0;
        for v in 0..c.vocab_size {
            let g = dz[v];
            grow[v] += hv * g;
            acc += wrow[v] * g;
        }
        dhidden[j] = acc;
    }
    for (gb, &g) in grads.output_bias.iter_mut().zip(&dz) {
        *gb += g;
    }

    // through tanh
    let mut dpre = vec![0.0; c.h];
    for j in 0..c.h {
        dpre[j] = dhidden[j] * (1.0 - trace.hidden[j] * trace.hidden[j]);
    }

    let mut dinput = vec![0.0; c.input_dim()];
    for (i, &x) in trace.input.iter().enumerate() {
        let wrow = &params.hidden_weights[i * c.h..(i + 1) * c.h];
        let grow = &mut grads.hidden_weights[i * c.h..(i + 1) * c.h];
        let mut acc = 0.0;
        for j in 0..c.h {
            let g = dpre[j];
            grow[j] += x * g;
            acc += wrow[j] * g;
        }
        dinput[i] = acc;
    }
    for (gb, &g) in grads.hidden_bias.iter_mut().zip(&dpre) {
        *gb += g;
    }

    // context embeddings
    for (slot, &t) in context.iter().enumerate() {
        let src = &dinput[slot * c.d..(slot + 1) * c.d];
        let dst = &mut grads.token_embeddings[t as usize * c.d..(t as usize + 1) * c.d];
        for (g, &d) in dst.iter_mut().zip(src) {
            *g += d;
        }
    }

    // prompt pooling: feat = mean_emb . W_pool
    let dfeat = &dinput[c.k * c.d..];
    for i in 0..c.d {
        let mi = trace.mean_prompt_embedding[i];
        let grow = &mut grads.prompt_pool_weights[i * c.d..(i + 1) * c.d];
        for (g, &df) in grow.iter_mut().zip(dfeat) {
            *g += mi * df;
        }
    }
    let mut dmean = vec![0.0; c.d];
    for i in 0..c.d {
        let wrow = &params.prompt_pool_weights[i * c.d..(i + 1) * c.d];
        dmean[i] = wrow.iter().zip(dfeat).map(|(w, df)| w * df).sum();
    }
    let n = prompt.tokens.len() as f64;
    for &t in &prompt.tokens {
        let dst = &mut grads.token_embeddings[t as usize * c.d..(t as usize + 1) * c.d];
        for (g, &dm) in dst.iter_mut().zip(&dmean) {
            *g += dm / n;
        }
    }
}
