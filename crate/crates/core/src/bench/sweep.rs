//! Consolidator depth sweep: accuracy, latency and size against `L`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::consolidator::{Consolidator, ConsolidatorConfig};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::trainer::{make_synthetic_dataset, prepare_all, train_and_evaluate, SyntheticTaskSpec, TrainConfig};

use super::cyclic::synthetic_prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    /// Needs more than `max(depths)` layers.
    pub backbone: BackboneConfig,
    pub task: SyntheticTaskSpec,
    pub n_train: usize,
    pub n_heldout: usize,
    pub train: TrainConfig,
    /// Cache length the latency probe consolidates over.
    pub latency_context: usize,
    pub latency_runs: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: (1..=6).collect(),
            backbone: BackboneConfig::sized(8, 32, 4),
            task: SyntheticTaskSpec {
                distractor_len: 16,
                ..Default::default()
            },
            n_train: 256,
            n_heldout: 64,
            train: TrainConfig {
                batch_size: 16,
                epochs: 2,
                ..TrainConfig::desk()
            },
            latency_context: 512,
            latency_runs: 15,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::config("depths must be a non-empty list of positive layer counts"));
        }
        if let Some(&l) = self.depths.iter().find(|&&l| l >= self.backbone.n_layers) {
            return Err(Error::config(format!(
                "depth {l} needs a backbone deeper than {} layers",
                self.backbone.n_layers
            )));
        }
        if self.latency_runs == 0 || self.latency_context == 0 {
            return Err(Error::config("latency_runs and latency_context must be positive"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "L")]
    pub layers: usize,
    pub heldout_accuracy: f64,
    pub heldout_ce: f64,
    /// Median of `latency_runs` timed consolidations.
    pub consolidation_ms: f64,
    pub param_count: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Wall time of one `generate` over a cache of `context` positions.
pub fn consolidation_latency<T: Scalar>(
    backbone: &Backbone<T>,
    consolidator: &Consolidator<T>,
    context: usize,
    runs: usize,
    seed: u64,
) -> Result<f64> {
    let prompt = synthetic_prompt(context, backbone.config().vocab_size, seed);
    let (cache, out) = backbone.prefill(&prompt)?;
    consolidator.generate(out.last_hidden.data(), &cache, 0, 0.0)?;
    let times = (0..runs)
        .map(|_| {
            let t = Instant::now();
            consolidator.generate(out.last_hidden.data(), &cache, 0, 0.0)?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(median(times))
}

/// Trains a fresh consolidator per depth under the same budget and data.
pub fn depth_sweep<T: Scalar>(cfg: &SweepConfig, mut on_row: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let backbone = Backbone::<T>::init(cfg.backbone.clone(), cfg.seed)?;
    let task = SyntheticTaskSpec { seed: cfg.seed, ..cfg.task.clone() };
    let split = make_synthetic_dataset(&task, cfg.backbone.vocab_size, cfg.n_train, cfg.n_heldout)?;
    let train = prepare_all(&backbone, &split.train)?;
    let heldout = prepare_all(&backbone, &split.heldout)?;
    let mut rows = Vec::with_capacity(cfg.depths.len());
    for &layers in &cfg.depths {
        let tc = TrainConfig {
            consolidator_layers: layers,
            seed: cfg.seed,
            ..cfg.train.clone()
        };
        let (consolidator, report) = train_and_evaluate(&backbone, &train, &heldout, &tc)?;
        let row = SweepRow {
            layers,
            heldout_accuracy: report.heldout_with_memory.accuracy,
            heldout_ce: report.heldout_with_memory.mean_ce,
            consolidation_ms: consolidation_latency(&backbone, &consolidator, cfg.latency_context, cfg.latency_runs, cfg.seed)?,
            param_count: consolidator.param_count(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Parameter count of an untrained consolidator of each depth.
pub fn param_counts<T: Scalar>(backbone: &Backbone<T>, k: usize, depths: &[usize]) -> Result<Vec<usize>> {
    depths
        .iter()
        .map(|&l| {
            let cfg = ConsolidatorConfig {
                n_layers: l,
                n_memory_tokens: k,
                d_model: backbone.config().d_model,
            };
            Ok(Consolidator::inherit(backbone, cfg, 0)?.param_count())
        })
        .collect()
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}
