//! Shared-KV memory consolidator.
//!
//! The last hidden state is projected to a seed latent `m_0`, then an
//! `L`-layer decoder stack inherited from the backbone's last `L` layers
//! emits `K` latent embeddings one at a time. Each layer attends causally
//! over the latent prefix, then cross-attends straight into the backbone's
//! cached keys and values with only a query projection, then applies its
//! gated MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Var};
use crate::backbone::{normal_tensor, Backbone, BackboneConfig, KvCache};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, HeadLayout, KeepProbs, KeyMask};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatorConfig {
    /// Stacked decoder layers `L`.
    pub n_layers: usize,
    /// Latent embeddings emitted per consolidation, `K`.
    pub n_memory_tokens: usize,
    pub d_model: usize,
}

impl ConsolidatorConfig {
    pub fn for_backbone(backbone: &BackboneConfig) -> Self {
        ConsolidatorConfig {
            n_layers: 1,
            n_memory_tokens: 8,
            d_model: backbone.d_model,
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.n_layers == 0 || self.n_layers >= backbone.n_layers {
            return Err(Error::config(format!(
                "consolidator layers must satisfy 1 <= L < {} (backbone layers), got {}",
                backbone.n_layers, self.n_layers
            )));
        }
        if self.n_memory_tokens == 0 {
            return Err(Error::config("memory token count K must be at least 1"));
        }
        if self.d_model != backbone.d_model {
            return Err(Error::config(format!(
                "consolidator d_model {} does not match backbone d_model {}",
                self.d_model, backbone.d_model
            )));
        }
        Ok(())
    }
}

/// Two dense layers with a SiLU in between: `m_0 = silu(h·W1 + b1)·W2 + b2`.
#[derive(Debug)]
pub struct ProjectionMlp<T> {
    pub w1: Parameter<T>,
    pub b1: Parameter<T>,
    pub w2: Parameter<T>,
    pub b2: Parameter<T>,
}

impl<T: Scalar> ProjectionMlp<T> {
    pub fn parameters(&self) -> [&Parameter<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn parameters_mut(&mut self) -> [&mut Parameter<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn project(&self, h: &[T]) -> Result<Vec<T>> {
        let d = self.b1.numel();
        if h.len() != d {
            return Err(Error::contract(format!(
                "hidden state has length {}, expected {d}",
                h.len()
            )));
        }
        let mut a = kernels::matmul(h, self.w1.value().data(), 1, d, d);
        for (x, &b) in a.iter_mut().zip(self.b1.value().data()) {
            *x = kernels::silu(*x + b);
        }
        let mut m = kernels::matmul(&a, self.w2.value().data(), 1, d, d);
        for (x, &b) in m.iter_mut().zip(self.b2.value().data()) {
            *x += b;
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("project_state"));
        }
        Ok(m)
    }
}

/// One consolidator block. The cross-attention sub-block owns a query and an
/// output projection only.
#[derive(Debug)]
pub struct ConsolidatorLayer<T> {
    /// Backbone layer whose weights seeded this block and whose cache it reads.
    pub source_layer: usize,
    pub self_norm: Parameter<T>,
    pub self_wq: Parameter<T>,
    pub self_wk: Parameter<T>,
    pub self_wv: Parameter<T>,
    pub self_wo: Parameter<T>,
    pub cross_norm: Parameter<T>,
    pub cross_wq: Parameter<T>,
    pub cross_wo: Parameter<T>,
    pub mlp_norm: Parameter<T>,
    pub w_gate: Parameter<T>,
    pub w_up: Parameter<T>,
    pub w_down: Parameter<T>,
}

impl<T: Scalar> ConsolidatorLayer<T> {
    pub fn parameters(&self) -> [&Parameter<T>; 12] {
        [
            &self.self_norm,
            &self.self_wq,
            &self.self_wk,
            &self.self_wv,
            &self.self_wo,
            &self.cross_norm,
            &self.cross_wq,
            &self.cross_wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn parameters_mut(&mut self) -> [&mut Parameter<T>; 12] {
        [
            &mut self.self_norm,
            &mut self.self_wq,
            &mut self.self_wk,
            &mut self.self_wv,
            &mut self.self_wo,
            &mut self.cross_norm,
            &mut self.cross_wq,
            &mut self.cross_wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// `K` consolidated embeddings plus where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMemory<T> {
    /// `[K, d_model]`: `m_1 .. m_K`.
    pub embeddings: Tensor<T>,
    /// `[d_model]`: the projected seed `m_0`.
    pub seed: Tensor<T>,
    pub trigger_step: usize,
    pub trigger_entropy: f64,
}

impl<T: Scalar> LatentMemory<T> {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.embeddings.data().chunks_exact(self.embeddings.cols())
    }
}

#[derive(Debug)]
pub struct Consolidator<T> {
    config: ConsolidatorConfig,
    layout: HeadLayout,
    d_ff: usize,
    rope_base: f64,
    norm_eps: f64,
    pub projection: ProjectionMlp<T>,
    pub layers: Vec<ConsolidatorLayer<T>>,
}

/// Standard deviation of the freshly initialized projection MLP.
pub const PROJECTION_INIT_STD: f64 = 0.02;

impl<T: Scalar> Consolidator<T> {
    /// Builds a consolidator whose layer `i` copies backbone layer
    /// `N - L + i`. The projection MLP is freshly drawn from `seed`.
    pub fn inherit(backbone: &Backbone<T>, config: ConsolidatorConfig, seed: u64) -> Result<Self> {
        let bcfg = backbone.config();
        config.validate(bcfg)?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = ProjectionMlp {
            w1: Parameter::new("consolidator/projection.w1", normal_tensor(&mut rng, &[d, d], PROJECTION_INIT_STD), true),
            b1: Parameter::new("consolidator/projection.b1", Tensor::zeros(&[d]), true),
            w2: Parameter::new("consolidator/projection.w2", normal_tensor(&mut rng, &[d, d], PROJECTION_INIT_STD), true),
            b2: Parameter::new("consolidator/projection.b2", Tensor::zeros(&[d]), true),
        };
        let first = bcfg.n_layers - config.n_layers;
        let layers = (0..config.n_layers)
            .map(|i| {
                let src = &backbone.layers[first + i];
                let name = |s: &str| format!("consolidator/layers.{i}.{s}");
                ConsolidatorLayer {
                    source_layer: first + i,
                    self_norm: src.attn_norm.duplicate(name("self_norm"), true),
                    self_wq: src.wq.duplicate(name("self_wq"), true),
                    self_wk: src.wk.duplicate(name("self_wk"), true),
                    self_wv: src.wv.duplicate(name("self_wv"), true),
                    self_wo: src.wo.duplicate(name("self_wo"), true),
                    cross_norm: src.attn_norm.duplicate(name("cross_norm"), true),
                    cross_wq: src.wq.duplicate(name("cross_wq"), true),
                    cross_wo: src.wo.duplicate(name("cross_wo"), true),
                    mlp_norm: src.mlp_norm.duplicate(name("mlp_norm"), true),
                    w_gate: src.w_gate.duplicate(name("w_gate"), true),
                    w_up: src.w_up.duplicate(name("w_up"), true),
                    w_down: src.w_down.duplicate(name("w_down"), true),
                }
            })
            .collect();
        Ok(Consolidator {
            config,
            layout: bcfg.layout(),
            d_ff: bcfg.d_ff,
            rope_base: bcfg.rope_base,
            norm_eps: bcfg.norm_eps,
            projection,
            layers,
        })
    }

    /// Assembles a consolidator from named tensors (checkpoint loading).
    pub(crate) fn from_named(
        backbone: &BackboneConfig,
        config: ConsolidatorConfig,
        mut take: impl FnMut(&str, &[usize]) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        config.validate(backbone)?;
        let d = config.d_model;
        let ff = backbone.d_ff;
        let mut p = |name: String, shape: &[usize]| -> Result<Parameter<T>> {
            let t = take(&name, shape)?;
            Ok(Parameter::new(name, t, true))
        };
        let projection = ProjectionMlp {
            w1: p("consolidator/projection.w1".into(), &[d, d])?,
            b1: p("consolidator/projection.b1".into(), &[d])?,
            w2: p("consolidator/projection.w2".into(), &[d, d])?,
            b2: p("consolidator/projection.b2".into(), &[d])?,
        };
        let first = backbone.n_layers - config.n_layers;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let name = |s: &str| format!("consolidator/layers.{i}.{s}");
            layers.push(ConsolidatorLayer {
                source_layer: first + i,
                self_norm: p(name("self_norm"), &[d])?,
                self_wq: p(name("self_wq"), &[d, d])?,
                self_wk: p(name("self_wk"), &[d, d])?,
                self_wv: p(name("self_wv"), &[d, d])?,
                self_wo: p(name("self_wo"), &[d, d])?,
                cross_norm: p(name("cross_norm"), &[d])?,
                cross_wq: p(name("cross_wq"), &[d, d])?,
                cross_wo: p(name("cross_wo"), &[d, d])?,
                mlp_norm: p(name("mlp_norm"), &[d])?,
                w_gate: p(name("w_gate"), &[d, ff])?,
                w_up: p(name("w_up"), &[d, ff])?,
                w_down: p(name("w_down"), &[ff, d])?,
            });
        }
        Ok(Consolidator {
            config,
            layout: backbone.layout(),
            d_ff: ff,
            rope_base: backbone.rope_base,
            norm_eps: backbone.norm_eps,
            projection,
            layers,
        })
    }

    pub fn config(&self) -> &ConsolidatorConfig {
        &self.config
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = self.projection.parameters().into();
        for l in &self.layers {
            out.extend(l.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = self.projection.parameters_mut().into();
        for l in &mut self.layers {
            out.extend(l.parameters_mut());
        }
        out
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().filter(|p| p.trainable()).map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// `m_0` from the backbone's last hidden state.
    pub fn project_state(&self, h_t: &[T]) -> Result<Vec<T>> {
        self.projection.project(h_t)
    }

    fn check_cache(&self, cache: &KvCache<T>) -> Result<()> {
        if cache.is_empty() {
            return Err(Error::contract("cross-attention over an empty cache"));
        }
        let need = self.layers.iter().map(|l| l.source_layer).max().unwrap_or(0);
        if cache.n_layers() <= need || cache.layout().d_model() != self.config.d_model {
            return Err(Error::contract("cache does not match the consolidator's backbone"));
        }
        Ok(())
    }

    /// Projection-free cross-attention of rows `x` (`[n, d_model]`, already
    /// normalized) into the cache layer read by consolidator layer `layer`:
    /// per head `softmax((x·W_Q)·Kᵀ/√d_head)·V`, heads concatenated, then the
    /// inherited output projection. Queries are not rotated.
    pub fn cross_attend(&self, layer: usize, x: &[T], cache: &KvCache<T>) -> Result<Vec<T>> {
        self.check_cache(cache)?;
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::contract(format!("no consolidator layer {layer}")))?;
        let d = self.config.d_model;
        if x.is_empty() || x.len() % d != 0 {
            return Err(Error::Dimension {
                op: "cross_attend",
                lhs: vec![x.len()],
                rhs: vec![d],
            });
        }
        let n = x.len() / d;
        let q = kernels::matmul(x, l.cross_wq.value().data(), n, d, d);
        let src = l.source_layer;
        let (attn, _) = kernels::attention(
            &q,
            n,
            cache.keys(src),
            cache.values(src),
            cache.len(),
            self.layout,
            KeyMask::Full,
            KeepProbs::None,
        );
        Ok(kernels::matmul(&attn, l.cross_wo.value().data(), n, d, d))
    }

    fn layer_forward(&self, li: usize, x: &mut [T], cache: &KvCache<T>) -> Result<()> {
        let l = &self.layers[li];
        let d = self.config.d_model;
        let n = x.len() / d;
        let eps = T::of(self.norm_eps);
        let mut h = vec![T::zero(); n * d];

        norm_rows(x, l.self_norm.value().data(), eps, d, &mut h);
        let mut q = kernels::matmul(&h, l.self_wq.value().data(), n, d, d);
        let mut k = kernels::matmul(&h, l.self_wk.value().data(), n, d, d);
        let v = kernels::matmul(&h, l.self_wv.value().data(), n, d, d);
        let inv_freq = kernels::rope_inv_freq(self.layout.d_head, self.rope_base);
        for i in 0..n {
            kernels::rope_row(&mut q[i * d..(i + 1) * d], i, self.layout.d_head, &inv_freq, false);
            kernels::rope_row(&mut k[i * d..(i + 1) * d], i, self.layout.d_head, &inv_freq, false);
        }
        let (a, _) = kernels::attention(
            &q,
            n,
            &k,
            &v,
            n,
            self.layout,
            KeyMask::Causal { first_query_pos: 0 },
            KeepProbs::None,
        );
        let o = kernels::matmul(&a, l.self_wo.value().data(), n, d, d);
        add_in_place(x, &o);

        norm_rows(x, l.cross_norm.value().data(), eps, d, &mut h);
        let c = self.cross_attend(li, &h, cache)?;
        add_in_place(x, &c);

        norm_rows(x, l.mlp_norm.value().data(), eps, d, &mut h);
        let gate = kernels::matmul(&h, l.w_gate.value().data(), n, d, self.d_ff);
        let up = kernels::matmul(&h, l.w_up.value().data(), n, d, self.d_ff);
        let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
        let down = kernels::matmul(&act, l.w_down.value().data(), n, self.d_ff, d);
        add_in_place(x, &down);
        Ok(())
    }

    /// Runs the full stack over the latent prefix `seq` (`[n, d_model]`).
    pub fn stack_forward(&self, seq: &[T], cache: &KvCache<T>) -> Result<Vec<T>> {
        let mut x = seq.to_vec();
        for li in 0..self.layers.len() {
            self.layer_forward(li, &mut x, cache)?;
        }
        Ok(x)
    }

    /// Deterministically emits `K` latents from `h_t`, reading `cache` only.
    pub fn generate(&self, h_t: &[T], cache: &KvCache<T>, trigger_step: usize, trigger_entropy: f64) -> Result<LatentMemory<T>> {
        self.check_cache(cache)?;
        let d = self.config.d_model;
        let k = self.config.n_memory_tokens;
        if k == 0 {
            return Err(Error::config("memory token count K must be at least 1"));
        }
        let m0 = self.project_state(h_t)?;
        let mut seq = m0.clone();
        for _ in 0..k {
            let out = self.stack_forward(&seq, cache)?;
            let last = &out[out.len() - d..];
            if last.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("consolidator generate"));
            }
            seq.extend_from_slice(last);
        }
        Ok(LatentMemory {
            embeddings: Tensor::from_parts(vec![k, d], seq[d..].to_vec()),
            seed: Tensor::from_parts(vec![d], m0),
            trigger_step,
            trigger_entropy,
        })
    }

    /// Differentiable twin of [`Consolidator::generate`]; `h_t` is a
    /// `[1, d_model]` node. Returns the `[K, d_model]` latents.
    pub fn generate_tracked(&self, tape: &mut Tape<T>, h_t: Var, cache: &KvCache<T>) -> Result<Var> {
        self.check_cache(cache)?;
        let d = self.config.d_model;
        let w1 = tape.param(&self.projection.w1);
        let b1 = tape.param(&self.projection.b1);
        let w2 = tape.param(&self.projection.w2);
        let b2 = tape.param(&self.projection.b2);
        let a = tape.matmul(h_t, w1)?;
        let a = tape.add_bias(a, b1)?;
        let a = tape.silu(a)?;
        let m = tape.matmul(a, w2)?;
        let m0 = tape.add_bias(m, b2)?;

        let layers: Vec<TrackedLayer> = self
            .layers
            .iter()
            .map(|l| TrackedLayer::register(tape, l, cache, d))
            .collect();

        let mut rows = vec![m0];
        let mut latents = Vec::with_capacity(self.config.n_memory_tokens);
        for _ in 0..self.config.n_memory_tokens {
            let mut x = tape.concat_rows(&rows)?;
            for tl in &layers {
                x = self.tracked_layer(tape, tl, x)?;
            }
            let n = tape.value(x).rows();
            let last = tape.slice_rows(x, n - 1, 1)?;
            rows.push(last);
            latents.push(last);
        }
        tape.concat_rows(&latents)
    }

    fn tracked_layer(&self, tape: &mut Tape<T>, tl: &TrackedLayer, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let positions: Vec<usize> = (0..n).collect();
        let dh = self.layout.d_head;
        let h = tape.rms_norm(x, tl.self_norm, self.norm_eps)?;
        let q = tape.matmul(h, tl.self_wq)?;
        let q = tape.rope(q, &positions, dh, self.rope_base)?;
        let k = tape.matmul(h, tl.self_wk)?;
        let k = tape.rope(k, &positions, dh, self.rope_base)?;
        let v = tape.matmul(h, tl.self_wv)?;
        let a = tape.attention(q, k, v, self.layout, KeyMask::Causal { first_query_pos: 0 })?;
        let o = tape.matmul(a, tl.self_wo)?;
        let x = tape.add(x, o)?;

        let h = tape.rms_norm(x, tl.cross_norm, self.norm_eps)?;
        let q = tape.matmul(h, tl.cross_wq)?;
        let a = tape.attention(q, tl.cache_keys, tl.cache_values, self.layout, KeyMask::Full)?;
        let c = tape.matmul(a, tl.cross_wo)?;
        let x = tape.add(x, c)?;

        let h = tape.rms_norm(x, tl.mlp_norm, self.norm_eps)?;
        let gate = tape.matmul(h, tl.w_gate)?;
        let gate = tape.silu(gate)?;
        let up = tape.matmul(h, tl.w_up)?;
        let act = tape.mul(gate, up)?;
        let down = tape.matmul(act, tl.w_down)?;
        tape.add(x, down)
    }
}

struct TrackedLayer {
    self_norm: Var,
    self_wq: Var,
    self_wk: Var,
    self_wv: Var,
    self_wo: Var,
    cross_norm: Var,
    cross_wq: Var,
    cross_wo: Var,
    mlp_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
    cache_keys: Var,
    cache_values: Var,
}

impl TrackedLayer {
    fn register<T: Scalar>(tape: &mut Tape<T>, l: &ConsolidatorLayer<T>, cache: &KvCache<T>, d: usize) -> Self {
        let len = cache.len();
        TrackedLayer {
            self_norm: tape.param(&l.self_norm),
            self_wq: tape.param(&l.self_wq),
            self_wk: tape.param(&l.self_wk),
            self_wv: tape.param(&l.self_wv),
            self_wo: tape.param(&l.self_wo),
            cross_norm: tape.param(&l.cross_norm),
            cross_wq: tape.param(&l.cross_wq),
            cross_wo: tape.param(&l.cross_wo),
            mlp_norm: tape.param(&l.mlp_norm),
            w_gate: tape.param(&l.w_gate),
            w_up: tape.param(&l.w_up),
            w_down: tape.param(&l.w_down),
            cache_keys: tape.constant(Tensor::from_parts(vec![len, d], cache.keys(l.source_layer).to_vec())),
            cache_values: tape.constant(Tensor::from_parts(vec![len, d], cache.values(l.source_layer).to_vec())),
        }
    }
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
