//! A small frozen decoder-only transformer with an explicit KV cache.
//!
//! Pre-norm blocks with RMS normalization, rotary positions on queries and
//! keys, and a SiLU-gated MLP. Each step exposes the logits, the last layer's
//! attention distribution of the current query, and the post-final-norm
//! hidden state.

mod cache;
mod full;
mod tracked;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, HeadLayout, KeepProbs, KeyMask};
use crate::tensor::{Scalar, Tensor};

pub use cache::KvCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 256,
            vocab_size: 256,
            max_positions: 8192,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl BackboneConfig {
    /// A config with `d_head = d_model / n_heads` and `d_ff = 4 · d_model`.
    pub fn sized(n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        BackboneConfig {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            d_ff: 4 * d_model,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be at least 1"));
        }
        if self.n_heads == 0 || self.n_heads * self.d_head != self.d_model {
            return Err(Error::config(format!(
                "n_heads · d_head ({} · {}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::config("d_head must be even for rotary embeddings"));
        }
        if self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::config("d_ff and vocab_size must be positive"));
        }
        if self.max_positions == 0 {
            return Err(Error::config("max_positions must be at least 1"));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::config("rope_base and norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_heads: self.n_heads,
            d_head: self.d_head,
        }
    }
}

/// Weights of one decoder block.
#[derive(Debug)]
pub struct BackboneLayer<T> {
    pub attn_norm: Parameter<T>,
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub wo: Parameter<T>,
    pub mlp_norm: Parameter<T>,
    pub w_gate: Parameter<T>,
    pub w_up: Parameter<T>,
    pub w_down: Parameter<T>,
}

impl<T: Scalar> BackboneLayer<T> {
    pub fn parameters(&self) -> [&Parameter<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn parameters_mut(&mut self) -> [&mut Parameter<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// One backbone input position.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a, T> {
    Token(u32),
    /// A continuous embedding of length `d_model`, fed in place of a token.
    Latent(&'a [T]),
}

/// Owned history entry, used to re-encode a full context.
#[derive(Debug, Clone, PartialEq)]
pub enum HistoryItem<T> {
    Token(u32),
    Latent(Vec<T>),
}

impl<T> HistoryItem<T> {
    pub fn as_input(&self) -> StepInput<'_, T> {
        match self {
            HistoryItem::Token(t) => StepInput::Token(*t),
            HistoryItem::Latent(v) => StepInput::Latent(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// `[vocab_size]`
    pub logits: Tensor<T>,
    /// `[n_heads, cache_len]`: the current query's last-layer attention.
    pub last_layer_attention: Tensor<T>,
    /// `[d_model]`, after the final normalization.
    pub last_hidden: Tensor<T>,
}

#[derive(Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    pub embed: Parameter<T>,
    pub layers: Vec<BackboneLayer<T>>,
    pub final_norm: Parameter<T>,
    pub lm_head: Parameter<T>,
    forward_calls: AtomicU64,
}

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

/// Logit standard deviation for a unit-RMS final hidden state at init. At 1
/// a d_model = 64 head cannot express a confident (< 0.1 nat) prediction for
/// every token.
pub const LM_HEAD_GAIN: f64 = 2.0;

impl<T: Scalar> Backbone<T> {
    /// Deterministic random weights; every parameter is frozen.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let w = 1.0 / (d as f64).sqrt();
        let frozen = |name: String, shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            Parameter::new(name, normal_tensor(rng, shape, std), false)
        };
        let embed = frozen("embed".into(), &[config.vocab_size, d], 1.0, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(BackboneLayer {
                attn_norm: Parameter::new(p("attn_norm"), Tensor::full(&[d], T::one()), false),
                wq: frozen(p("wq"), &[d, d], w, &mut rng),
                wk: frozen(p("wk"), &[d, d], w, &mut rng),
                wv: frozen(p("wv"), &[d, d], w, &mut rng),
                wo: frozen(p("wo"), &[d, d], w, &mut rng),
                mlp_norm: Parameter::new(p("mlp_norm"), Tensor::full(&[d], T::one()), false),
                w_gate: frozen(p("w_gate"), &[d, ff], w, &mut rng),
                w_up: frozen(p("w_up"), &[d, ff], w, &mut rng),
                w_down: frozen(p("w_down"), &[ff, d], 1.0 / (ff as f64).sqrt(), &mut rng),
            });
        }
        let final_norm = Parameter::new("final_norm", Tensor::full(&[d], T::one()), false);
        let lm_head = frozen("lm_head".into(), &[d, config.vocab_size], LM_HEAD_GAIN * w, &mut rng);
        Ok(Backbone {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
            forward_calls: AtomicU64::new(0),
        })
    }

    /// Assembles a backbone from named tensors (checkpoint loading).
    pub(crate) fn from_named(config: BackboneConfig, mut take: impl FnMut(&str, &[usize]) -> Result<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let mut frozen = |name: String, shape: &[usize]| -> Result<Parameter<T>> {
            let t = take(&name, shape)?;
            Ok(Parameter::new(name, t, false))
        };
        let embed = frozen("embed".into(), &[config.vocab_size, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(BackboneLayer {
                attn_norm: frozen(p("attn_norm"), &[d])?,
                wq: frozen(p("wq"), &[d, d])?,
                wk: frozen(p("wk"), &[d, d])?,
                wv: frozen(p("wv"), &[d, d])?,
                wo: frozen(p("wo"), &[d, d])?,
                mlp_norm: frozen(p("mlp_norm"), &[d])?,
                w_gate: frozen(p("w_gate"), &[d, ff])?,
                w_up: frozen(p("w_up"), &[d, ff])?,
                w_down: frozen(p("w_down"), &[ff, d])?,
            });
        }
        let final_norm = frozen("final_norm".into(), &[d])?;
        let lm_head = frozen("lm_head".into(), &[d, config.vocab_size])?;
        Ok(Backbone {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend(l.parameters());
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.parameters_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Number of forward passes (prefill, decode step, full forward or
    /// tracked forward) executed so far.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    fn count_call(&self) {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn token_embedding(&self, token: u32) -> Result<&[T]> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(Error::contract(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.embed.value().row(t))
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.n_layers, self.config.layout(), self.config.max_positions)
    }

    fn embed_inputs<'a>(&self, inputs: impl IntoIterator<Item = StepInput<'a, T>>) -> Result<(Vec<T>, Vec<bool>)> {
        let d = self.config.d_model;
        let mut rows = Vec::new();
        let mut flags = Vec::new();
        for input in inputs {
            match input {
                StepInput::Token(t) => {
                    rows.extend_from_slice(self.token_embedding(t)?);
                    flags.push(false);
                }
                StepInput::Latent(v) => {
                    if v.len() != d {
                        return Err(Error::contract(format!(
                            "latent embedding has length {}, expected d_model = {d}",
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite("latent input"));
                    }
                    rows.extend_from_slice(v);
                    flags.push(true);
                }
            }
        }
        Ok((rows, flags))
    }

    /// Runs new positions through every layer, appending their keys and
    /// values to `cache`. Returns the step output for the last new position.
    fn forward_rows(&self, mut x: Vec<T>, flags: &[bool], cache: &mut KvCache<T>) -> Result<StepOutput<T>> {
        let cfg = &self.config;
        let n = flags.len();
        if n == 0 {
            return Err(Error::contract("forward over zero positions"));
        }
        cache.ensure_room(n)?;
        self.count_call();
        let d = cfg.d_model;
        let layout = cfg.layout();
        let eps = T::of(cfg.norm_eps);
        let inv_freq = kernels::rope_inv_freq(cfg.d_head, cfg.rope_base);
        let start = cache.len();
        let first_pos = cache.next_position();
        let mut h = vec![T::zero(); n * d];
        let mut last_attention = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            norm_rows(&x, layer.attn_norm.value().data(), eps, d, &mut h);
            let mut q = kernels::matmul(&h, layer.wq.value().data(), n, d, d);
            let mut k = kernels::matmul(&h, layer.wk.value().data(), n, d, d);
            let v = kernels::matmul(&h, layer.wv.value().data(), n, d, d);
            for i in 0..n {
                let pos = first_pos + i;
                kernels::rope_row(&mut q[i * d..(i + 1) * d], pos, cfg.d_head, &inv_freq, false);
                kernels::rope_row(&mut k[i * d..(i + 1) * d], pos, cfg.d_head, &inv_freq, false);
            }
            cache.push_layer(li, &k, &v);
            let n_k = start + n;
            let keep = if li + 1 == cfg.n_layers {
                KeepProbs::LastRow
            } else {
                KeepProbs::None
            };
            let (attn, probs) = kernels::attention(
                &q,
                n,
                cache.keys(li),
                cache.values(li),
                n_k,
                layout,
                KeyMask::Causal { first_query_pos: start },
                keep,
            );
            if keep == KeepProbs::LastRow {
                last_attention = probs;
            }
            let o = kernels::matmul(&attn, layer.wo.value().data(), n, d, d);
            add_in_place(&mut x, &o);
            norm_rows(&x, layer.mlp_norm.value().data(), eps, d, &mut h);
            let gate = kernels::matmul(&h, layer.w_gate.value().data(), n, d, cfg.d_ff);
            let up = kernels::matmul(&h, layer.w_up.value().data(), n, d, cfg.d_ff);
            let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
            let down = kernels::matmul(&act, layer.w_down.value().data(), n, cfg.d_ff, d);
            add_in_place(&mut x, &down);
        }
        cache.commit_positions(flags);
        let last = &x[(n - 1) * d..];
        let mut hidden = vec![T::zero(); d];
        kernels::rms_norm_row(last, self.final_norm.value().data(), eps, &mut hidden);
        let logits = kernels::matmul(&hidden, self.lm_head.value().data(), 1, d, cfg.vocab_size);
        Ok(StepOutput {
            logits: Tensor::checked(vec![cfg.vocab_size], logits, "backbone logits")?,
            last_layer_attention: Tensor::checked(vec![cfg.n_heads, start + n], last_attention, "backbone attention")?,
            last_hidden: Tensor::checked(vec![d], hidden, "backbone hidden")?,
        })
    }

    /// Processes a prompt into a fresh cache.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(KvCache<T>, StepOutput<T>)> {
        self.prefill_inputs(tokens.iter().map(|&t| StepInput::Token(t)))
    }

    /// Re-encodes an arbitrary mix of tokens and latent embeddings into a
    /// fresh cache.
    pub fn prefill_history(&self, history: &[HistoryItem<T>]) -> Result<(KvCache<T>, StepOutput<T>)> {
        self.prefill_inputs(history.iter().map(HistoryItem::as_input))
    }

    fn prefill_inputs<'a>(&self, inputs: impl IntoIterator<Item = StepInput<'a, T>>) -> Result<(KvCache<T>, StepOutput<T>)> {
        let (rows, flags) = self.embed_inputs(inputs)?;
        if flags.is_empty() {
            return Err(Error::contract("prefill requires at least one input"));
        }
        let mut cache = self.new_cache();
        let out = self.forward_rows(rows, &flags, &mut cache)?;
        Ok((cache, out))
    }

    /// Appends one position (token or latent embedding) to `cache`.
    pub fn decode_step(&self, input: StepInput<'_, T>, cache: &mut KvCache<T>) -> Result<StepOutput<T>> {
        if cache.is_empty() {
            return Err(Error::contract("decode_step requires a non-empty cache"));
        }
        let (rows, flags) = self.embed_inputs([input])?;
        self.forward_rows(rows, &flags, cache)
    }

    /// Greedy decoding with no memory, the reference for vanilla mode.
    pub fn greedy_decode(&self, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
        let (mut cache, mut out) = self.prefill(prompt)?;
        let mut tokens = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            let t = argmax(out.logits.data()) as u32;
            tokens.push(t);
            out = self.decode_step(StepInput::Token(t), &mut cache)?;
        }
        Ok(tokens)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn norm_rows<T: Scalar>(x: &[T], w: &[T], eps: T, d: usize, out: &mut [T]) {
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        kernels::rms_norm_row(xr, w, eps, or);
    }
}

fn add_in_place<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

#[cfg(test)]
mod tests;
