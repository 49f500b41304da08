//! Consolidator training through the frozen backbone.
//!
//! Every example is laid out as `S = [x, M, y]`: the prompt is encoded once
//! (the backbone never changes, so its cache is reused across epochs), the
//! consolidator emits `M` from the prompt's last hidden state and cache, and
//! `[M, y[..n-1]]` is run through the backbone on the tape. Only `y` is
//! scored.

mod data;
mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, AdamW, AdamWConfig, Tape};
use crate::backbone::{argmax, Backbone, KvCache, StepInput, StepOutput};
use crate::consolidator::{Consolidator, ConsolidatorConfig};
use crate::engine::inject;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use data::{
    make_synthetic_dataset, read_dataset_jsonl, recall_answer, write_dataset_jsonl, SyntheticSplit, SyntheticTaskSpec,
    Task, TrainingExample, BOS, PAD,
};
pub use loss::{masked_loss, masked_loss_sum, LabelSequence, IGNORE_INDEX};

/// Learning rate for large pretrained backbones. Desk-scale runs
/// override it (see [`TrainConfig::desk`]).
pub const LARGE_MODEL_LEARNING_RATE: f64 = 1e-5;

/// Training hyperparameters; the key names double as the TOML schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: String,
    pub warmup_ratio: f64,
    pub k_memory_tokens: usize,
    pub consolidator_layers: usize,
    /// Projection-MLP init and shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: "adamw".into(),
            learning_rate: LARGE_MODEL_LEARNING_RATE,
            weight_decay: 0.01,
            grad_clip: 0.53,
            batch_size: 64,
            epochs: 5,
            scheduler: "cosine".into(),
            warmup_ratio: 0.1,
            k_memory_tokens: 8,
            consolidator_layers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The default table with `learning_rate = 1e-3`, which a randomly
    /// initialized desk-scale model needs to move within a few hundred steps.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.optimizer.eq_ignore_ascii_case("adamw") {
            return Err(Error::config(format!("unsupported optimizer `{}` (only adamw)", self.optimizer)));
        }
        if !self.scheduler.eq_ignore_ascii_case("cosine") {
            return Err(Error::config(format!("unsupported scheduler `{}` (only cosine)", self.scheduler)));
        }
        let positive = [("learning_rate", self.learning_rate), ("grad_clip", self.grad_clip)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("weight_decay must be >= 0 and warmup_ratio in [0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.k_memory_tokens == 0 || self.consolidator_layers == 0 {
            return Err(Error::config(
                "batch_size, epochs, k_memory_tokens and consolidator_layers must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn consolidator_config(&self, d_model: usize) -> ConsolidatorConfig {
        ConsolidatorConfig {
            n_layers: self.consolidator_layers,
            n_memory_tokens: self.k_memory_tokens,
            d_model,
        }
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size)
    }
}

/// An example with its prompt already encoded.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub example: TrainingExample,
    cache: KvCache<T>,
    prompt_out: StepOutput<T>,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(backbone: &Backbone<T>, example: TrainingExample) -> Result<Self> {
        if example.x.is_empty() || example.y.is_empty() {
            return Err(Error::contract("training examples need non-empty x and y"));
        }
        let (cache, prompt_out) = backbone.prefill(&example.x)?;
        Ok(Prepared {
            example,
            cache,
            prompt_out,
        })
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Post-norm hidden state at the last prompt position.
    pub fn h_t(&self) -> &[T] {
        self.prompt_out.last_hidden.data()
    }
}

pub fn prepare_all<T: Scalar>(backbone: &Backbone<T>, examples: &[TrainingExample]) -> Result<Vec<Prepared<T>>> {
    examples.iter().map(|e| Prepared::new(backbone, e.clone())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean masked cross-entropy over the batch's target tokens.
    pub loss: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub pre_clip_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Teacher-forced score of `y`, with or without an injected memory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleScore {
    pub nll_sum: f64,
    pub n_targets: usize,
    /// Every `y` token is the argmax of its logits row.
    pub exact: bool,
}

/// Plain (untaped) evaluation of one example. Used for held-out metrics and
/// as the finite-difference reference for the tracked loss.
pub fn score_example<T: Scalar>(
    backbone: &Backbone<T>,
    consolidator: Option<&Consolidator<T>>,
    prepared: &Prepared<T>,
) -> Result<ExampleScore> {
    let y = &prepared.example.y;
    let mut cache = prepared.cache.clone();
    let mut out = match consolidator {
        Some(c) => {
            let memory = c.generate(prepared.h_t(), &prepared.cache, prepared.example.x.len(), 0.0)?;
            inject(&memory, backbone, &mut cache)?
        }
        None => prepared.prompt_out.clone(),
    };
    let mut nll_sum = 0.0;
    let mut exact = true;
    for (i, &target) in y.iter().enumerate() {
        let logits = out.logits.data();
        nll_sum += loss::row_nll(logits, target as usize);
        exact &= argmax(logits) == target as usize;
        if i + 1 < y.len() {
            out = backbone.decode_step(StepInput::Token(target), &mut cache)?;
        }
    }
    Ok(ExampleScore {
        nll_sum,
        n_targets: y.len(),
        exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean cross-entropy per target token.
    pub mean_ce: f64,
    /// Fraction of examples whose whole `y` is predicted exactly.
    pub accuracy: f64,
    pub n_examples: usize,
}

pub fn evaluate<T: Scalar>(
    backbone: &Backbone<T>,
    consolidator: Option<&Consolidator<T>>,
    examples: &[Prepared<T>],
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty set"));
    }
    let mut nll = 0.0;
    let mut targets = 0;
    let mut exact = 0;
    for p in examples {
        let s = score_example(backbone, consolidator, p)?;
        nll += s.nll_sum;
        targets += s.n_targets;
        exact += usize::from(s.exact);
    }
    Ok(EvalReport {
        mean_ce: nll / targets as f64,
        accuracy: exact as f64 / examples.len() as f64,
        n_examples: examples.len(),
    })
}

/// Builds the taped loss of one example, scaled by `scale`, and returns it.
fn tracked_loss<T: Scalar>(
    tape: &mut Tape<T>,
    backbone: &Backbone<T>,
    consolidator: &Consolidator<T>,
    prepared: &Prepared<T>,
    scale: f64,
) -> Result<crate::autodiff::Var> {
    let d = backbone.config().d_model;
    let k = consolidator.config().n_memory_tokens;
    let (x, y) = (&prepared.example.x, &prepared.example.y);
    let h = tape.constant(Tensor::from_parts(vec![1, d], prepared.h_t().to_vec()));
    let latents = consolidator.generate_tracked(tape, h, &prepared.cache)?;
    let block = if y.len() > 1 {
        let teacher = backbone.embed_tracked(tape, &y[..y.len() - 1])?;
        tape.concat_rows(&[latents, teacher])?
    } else {
        latents
    };
    let logits = backbone.forward_tracked(tape, &prepared.cache, block)?;
    let labels = LabelSequence::new(x.len(), k, y);
    let targets = labels.shifted_targets()[x.len()..x.len() + k + y.len() - 1].to_vec();
    tape.cross_entropy(logits, &targets, scale)
}

/// Loss of a batch through the tape, gradients accumulated into the
/// consolidator. Returns the mean loss per target token.
pub fn accumulate_batch_gradients<T: Scalar>(
    backbone: &Backbone<T>,
    consolidator: &mut Consolidator<T>,
    batch: &[&Prepared<T>],
) -> Result<f64> {
    let total_targets: usize = batch.iter().map(|p| p.example.y.len()).sum();
    if total_targets == 0 {
        return Err(Error::contract("batch has no target tokens"));
    }
    let scale = 1.0 / total_targets as f64;
    let mut loss = 0.0;
    for p in batch {
        let mut tape = Tape::new();
        let l = tracked_loss(&mut tape, backbone, consolidator, p, scale)?;
        loss += tape.value(l).data()[0].as_f64();
        let grads = tape.backward(l)?;
        for bp in backbone.parameters() {
            if let Some(g) = grads.of_param(bp.id()) {
                if g.data().iter().any(|v| *v != T::zero()) {
                    return Err(Error::FrozenViolation(bp.name().to_string()));
                }
            }
        }
        grads.accumulate_into(consolidator.parameters_mut());
    }
    check_frozen(backbone)?;
    Ok(loss)
}

fn check_frozen<T: Scalar>(backbone: &Backbone<T>) -> Result<()> {
    for p in backbone.parameters() {
        if p.trainable() || p.grad().data().iter().any(|v| *v != T::zero()) {
            return Err(Error::FrozenViolation(p.name().to_string()));
        }
    }
    Ok(())
}

/// Optimizer state bound to one consolidator.
pub struct Trainer<'a, T> {
    backbone: &'a Backbone<T>,
    consolidator: &'a mut Consolidator<T>,
    optimizer: AdamW,
    config: TrainConfig,
    step: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        backbone: &'a Backbone<T>,
        consolidator: &'a mut Consolidator<T>,
        config: TrainConfig,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        check_frozen(backbone)?;
        consolidator.config().validate(backbone.config())?;
        let optimizer = AdamW::new(AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            warmup_ratio: config.warmup_ratio,
            total_steps,
            ..Default::default()
        })?;
        Ok(Trainer {
            backbone,
            consolidator,
            optimizer,
            config,
            step: 0,
        })
    }

    pub fn consolidator(&self) -> &Consolidator<T> {
        self.consolidator
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Forward, backward, clip and one AdamW update.
    pub fn train_step(&mut self, batch: &[&Prepared<T>]) -> Result<StepMetrics> {
        let started = Instant::now();
        self.consolidator.zero_grad();
        let loss = accumulate_batch_gradients(self.backbone, self.consolidator, batch)?;
        let pre_clip_norm = clip_global_norm(self.consolidator.parameters_mut(), self.config.grad_clip);
        if !pre_clip_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let grad_norm = self
            .consolidator
            .parameters()
            .iter()
            .map(|p| p.grad().l2_norm_sq())
            .sum::<f64>()
            .sqrt();
        self.step += 1;
        let lr = self.optimizer.step(self.consolidator.parameters_mut(), self.step)?;
        Ok(StepMetrics {
            step: self.step,
            loss,
            grad_norm,
            pre_clip_norm,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Trains for `config.epochs` passes over `train`, reshuffled each epoch.
pub fn fit<T: Scalar>(
    backbone: &Backbone<T>,
    consolidator: &mut Consolidator<T>,
    train: &[Prepared<T>],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let per_epoch = config.steps_per_epoch(train.len());
    let mut trainer = Trainer::new(backbone, consolidator, config.clone(), per_epoch * config.epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(per_epoch * config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Prepared<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let m = trainer.train_step(&batch)?;
            on_step(&m);
            history.push(m);
        }
    }
    Ok(history)
}

/// Outcome of [`train_and_evaluate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    pub heldout_with_memory: EvalReport,
    pub heldout_without_memory: EvalReport,
}

impl TrainReport {
    /// `1 − CE_with / CE_without`.
    pub fn relative_improvement(&self) -> f64 {
        1.0 - self.heldout_with_memory.mean_ce / self.heldout_without_memory.mean_ce
    }
}

/// Inherits a fresh consolidator, trains it on `train` and scores `heldout`
/// with and without injected memory.
pub fn train_and_evaluate<T: Scalar>(
    backbone: &Backbone<T>,
    train: &[Prepared<T>],
    heldout: &[Prepared<T>],
    config: &TrainConfig,
) -> Result<(Consolidator<T>, TrainReport)> {
    config.validate()?;
    let mut consolidator = Consolidator::inherit(backbone, config.consolidator_config(backbone.config().d_model), config.seed)?;
    let steps = fit(backbone, &mut consolidator, train, config, |_| {})?;
    let report = TrainReport {
        steps,
        heldout_with_memory: evaluate(backbone, Some(&consolidator), heldout)?,
        heldout_without_memory: evaluate(backbone, None, heldout)?,
    };
    Ok((consolidator, report))
}
