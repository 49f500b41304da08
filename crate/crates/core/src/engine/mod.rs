//! Generation loop with entropy-gated consolidation.
//!
//! Each step reads the newest position's last-layer attention, asks the
//! monitor for its entropy and, when the step is eligible and the entropy
//! exceeds the threshold, consolidates: the consolidator turns the last
//! hidden state into `K` latents by reading the live cache, and the latents
//! are decoded into that same cache. The next token is then sampled from the
//! logits at the newest position (the last latent after an injection).
//!
//! [`Mode::Segregated`] keeps the trigger semantics and outputs but pays for
//! a full re-encode of the history into a private cache per consolidation.

mod trace;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, Backbone, HistoryItem, KvCache, StepInput, StepOutput};
use crate::consolidator::{Consolidator, LatentMemory};
use crate::error::{Error, Result};
use crate::monitor::Monitor;
use crate::tensor::{Scalar, Tensor};

pub use trace::{read_trace_jsonl, write_trace_jsonl, StepRecord, TraceLog, TraceRecord, TriggerRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No consolidation; the threshold is treated as infinite.
    Vanilla,
    FlashMem,
    /// Re-encodes the full history before each consolidation.
    #[serde(alias = "segregated_baseline")]
    Segregated,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::FlashMem, Mode::Segregated];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::FlashMem => "flashmem",
            Mode::Segregated => "segregated",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "flashmem" => Ok(Mode::FlashMem),
            "segregated" | "segregated_baseline" => Ok(Mode::Segregated),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected vanilla, flashmem or segregated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    /// Minimum distance in steps between two entropy-gated triggers.
    pub trigger_cooldown: usize,
    /// Entropy-gated triggers fire only at steps strictly greater than this.
    pub min_trigger_step: usize,
    pub mode: Mode,
    /// Steps that consolidate unconditionally (ignoring threshold, cooldown
    /// and `min_trigger_step`). Ignored in vanilla mode.
    pub forced_triggers: BTreeSet<usize>,
    /// Keep each step's attention row in the trace.
    pub record_attention: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 64,
            sampling: Sampling::Greedy,
            trigger_cooldown: 16,
            min_trigger_step: 5,
            mode: Mode::FlashMem,
            forced_triggers: BTreeSet::new(),
            record_attention: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        if let Sampling::Temperature { temperature, .. } = self.sampling {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
            }
        }
        Ok(())
    }
}

/// One consolidation.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerEvent<T> {
    pub step: usize,
    pub entropy_at_trigger: f64,
    pub memory: LatentMemory<T>,
    pub cache_len_before: usize,
    pub forced: bool,
    /// Consolidation plus injection (plus re-encode for the baseline).
    pub consolidation_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunTrace<T> {
    pub mode: Mode,
    pub prompt_tokens: Vec<u32>,
    pub generated_tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    pub triggers: Vec<TriggerEvent<T>>,
    /// Per step `[n_heads, cache_len]`, present when `record_attention`.
    pub attention: Vec<Tensor<f64>>,
    /// Latent flags of the final live cache.
    pub latent_flags: Vec<bool>,
    pub final_cache_len: usize,
    /// High-water mark of KV bytes held at once, private caches included.
    pub cache_bytes_peak: usize,
}

impl<T: Scalar> RunTrace<T> {
    /// Serializable per-step and per-trigger records.
    pub fn log(&self) -> TraceLog {
        TraceLog {
            steps: self.steps.clone(),
            triggers: self
                .triggers
                .iter()
                .map(|t| TriggerRecord {
                    step: t.step,
                    entropy: t.entropy_at_trigger,
                    k: t.memory.len(),
                    consolidation_ms: t.consolidation_ms,
                })
                .collect(),
        }
    }

    /// Equality on everything except wall-clock timings.
    pub fn same_behavior(&self, other: &RunTrace<T>) -> bool {
        let steps_eq = self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| a.without_timing() == b.without_timing());
        let triggers_eq = self.triggers.len() == other.triggers.len()
            && self.triggers.iter().zip(&other.triggers).all(|(a, b)| {
                a.step == b.step
                    && a.entropy_at_trigger.to_bits() == b.entropy_at_trigger.to_bits()
                    && a.memory == b.memory
                    && a.cache_len_before == b.cache_len_before
                    && a.forced == b.forced
            });
        self.mode == other.mode
            && self.prompt_tokens == other.prompt_tokens
            && self.generated_tokens == other.generated_tokens
            && steps_eq
            && triggers_eq
            && self.attention == other.attention
            && self.latent_flags == other.latent_flags
            && self.final_cache_len == other.final_cache_len
            && self.cache_bytes_peak == other.cache_bytes_peak
    }
}

/// A prefilled context ready to generate from. Cloning it lets many runs
/// share one prefill.
#[derive(Debug, Clone)]
pub struct Session<T> {
    prompt: Vec<u32>,
    cache: KvCache<T>,
    last: StepOutput<T>,
    history: Vec<HistoryItem<T>>,
}

impl<T: Scalar> Session<T> {
    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }
}

/// Decodes each latent of `memory` into `cache` and returns the output at the
/// last one. Earlier cache entries are not touched.
pub fn inject<T: Scalar>(memory: &LatentMemory<T>, backbone: &Backbone<T>, cache: &mut KvCache<T>) -> Result<StepOutput<T>> {
    if memory.is_empty() {
        return Err(Error::contract("cannot inject an empty memory"));
    }
    if memory.embeddings.cols() != backbone.config().d_model {
        return Err(Error::Dimension {
            op: "inject",
            lhs: memory.embeddings.shape().to_vec(),
            rhs: vec![backbone.config().d_model],
        });
    }
    cache.ensure_room(memory.len())?;
    let mut last = None;
    for row in memory.rows() {
        last = Some(backbone.decode_step(StepInput::Latent(row), cache)?);
    }
    Ok(last.expect("memory is non-empty"))
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

struct Sampler {
    rng: Option<(f64, ChaCha8Rng)>,
}

impl Sampler {
    fn new(sampling: Sampling) -> Self {
        match sampling {
            Sampling::Greedy => Sampler { rng: None },
            Sampling::Temperature { temperature, seed } => Sampler {
                rng: Some((temperature, ChaCha8Rng::seed_from_u64(seed))),
            },
        }
    }

    fn sample<T: Scalar>(&mut self, logits: &[T]) -> Result<u32> {
        match &mut self.rng {
            None => Ok(argmax(logits) as u32),
            Some((temp, rng)) => {
                let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - max) / *temp).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::contract(format!("sampling: {e}")))?;
                Ok(dist.sample(rng) as u32)
            }
        }
    }
}

/// Read-only models plus a monitor; sessions and runs hold all mutable state.
#[derive(Debug)]
pub struct Engine<'m, T> {
    backbone: &'m Backbone<T>,
    consolidator: Option<&'m Consolidator<T>>,
    monitor: Monitor,
}

impl<'m, T: Scalar> Engine<'m, T> {
    pub fn new(backbone: &'m Backbone<T>, consolidator: Option<&'m Consolidator<T>>, monitor: Monitor) -> Result<Self> {
        if let Some(c) = consolidator {
            c.config().validate(backbone.config())?;
        }
        Ok(Engine {
            backbone,
            consolidator,
            monitor,
        })
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn backbone(&self) -> &Backbone<T> {
        self.backbone
    }

    pub fn start(&self, prompt: &[u32]) -> Result<Session<T>> {
        let (cache, last) = self.backbone.prefill(prompt)?;
        Ok(Session {
            prompt: prompt.to_vec(),
            cache,
            last,
            history: prompt.iter().map(|&t| HistoryItem::Token(t)).collect(),
        })
    }

    pub fn run(&self, prompt: &[u32], config: &GenerationConfig) -> Result<RunTrace<T>> {
        self.run_session(self.start(prompt)?, config)
    }

    /// Same trigger semantics as [`Engine::run`]; each consolidation first
    /// re-encodes the whole history into a private cache.
    pub fn run_segregated_baseline(&self, prompt: &[u32], config: &GenerationConfig) -> Result<RunTrace<T>> {
        let config = GenerationConfig {
            mode: Mode::Segregated,
            ..config.clone()
        };
        self.run(prompt, &config)
    }

    fn consolidator(&self) -> Result<&'m Consolidator<T>> {
        self.consolidator
            .ok_or_else(|| Error::config("this mode needs a consolidator; none was loaded"))
    }

    pub fn run_session(&self, session: Session<T>, config: &GenerationConfig) -> Result<RunTrace<T>> {
        config.validate()?;
        let gating = config.mode != Mode::Vanilla;
        let tau = match (gating, self.monitor.config().threshold) {
            (false, _) => f64::INFINITY,
            (true, Some(t)) => t,
            (true, None) if !config.forced_triggers.is_empty() => f64::INFINITY,
            (true, None) => return Err(Error::config("monitor threshold is not set; calibrate or pass one")),
        };
        if gating {
            self.consolidator()?;
        }

        let Session {
            prompt,
            mut cache,
            mut last,
            mut history,
        } = session;
        let mut sampler = Sampler::new(config.sampling);
        let mut peak = cache.byte_count();
        let mut steps = Vec::with_capacity(config.max_new_tokens);
        let mut generated = Vec::with_capacity(config.max_new_tokens);
        let mut triggers = Vec::new();
        let mut attention = Vec::new();
        let mut last_trigger: Option<usize> = None;

        for step in 0..config.max_new_tokens {
            let started = Instant::now();
            let (entropy, per_head, degenerate) = self.monitor.entropy(&last.last_layer_attention)?;
            if config.record_attention {
                attention.push(last.last_layer_attention.cast::<f64>());
            }
            let forced = gating && config.forced_triggers.contains(&step);
            let eligible = step > config.min_trigger_step
                && last_trigger.map_or(true, |l| step - l >= config.trigger_cooldown);
            let triggered = forced || (gating && eligible && entropy > tau);

            if triggered {
                let t0 = Instant::now();
                let cache_len_before = cache.len();
                let memory = match config.mode {
                    Mode::Segregated => {
                        let (private, reencoded) = self.backbone.prefill_history(&history)?;
                        peak = peak.max(cache.byte_count() + private.byte_count());
                        self.consolidator()?
                            .generate(reencoded.last_hidden.data(), &private, step, entropy)?
                    }
                    _ => self.consolidator()?.generate(last.last_hidden.data(), &cache, step, entropy)?,
                };
                last = inject(&memory, self.backbone, &mut cache)?;
                history.extend(memory.rows().map(|r| HistoryItem::Latent(r.to_vec())));
                peak = peak.max(cache.byte_count());
                triggers.push(TriggerEvent {
                    step,
                    entropy_at_trigger: entropy,
                    memory,
                    cache_len_before,
                    forced,
                    consolidation_ms: elapsed_ms(t0),
                });
                last_trigger = Some(step);
            }

            let token = sampler.sample(last.logits.data())?;
            generated.push(token);
            history.push(HistoryItem::Token(token));
            last = self.backbone.decode_step(StepInput::Token(token), &mut cache)?;
            peak = peak.max(cache.byte_count());
            steps.push(StepRecord {
                step,
                token,
                entropy,
                triggered,
                wall_ms: elapsed_ms(started),
                cache_len: cache.len(),
                per_head_entropy: per_head,
                degenerate,
            });
        }

        Ok(RunTrace {
            mode: config.mode,
            prompt_tokens: prompt,
            generated_tokens: generated,
            steps,
            triggers,
            attention,
            latent_flags: cache.is_latent().to_vec(),
            final_cache_len: cache.len(),
            cache_bytes_peak: peak,
        })
    }
}
