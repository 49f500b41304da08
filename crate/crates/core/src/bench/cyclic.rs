//! Cyclic generation benchmark: text spans alternating with forced
//! consolidations.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, KvCache};
use crate::consolidator::Consolidator;
use crate::engine::{Engine, GenerationConfig, Mode, RunTrace};
use crate::error::{Error, Result};
use crate::monitor::Monitor;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub contexts: Vec<usize>,
    pub modes: Vec<Mode>,
    pub n_runs: usize,
    pub cycles: usize,
    pub tokens_per_cycle: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            contexts: vec![256, 512, 1024, 2048, 4096],
            modes: Mode::ALL.to_vec(),
            n_runs: 30,
            cycles: 8,
            tokens_per_cycle: 32,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() || self.modes.is_empty() {
            return Err(Error::config("bench needs at least one context and one mode"));
        }
        if self.contexts.contains(&0) {
            return Err(Error::config("context lengths must be positive"));
        }
        if self.n_runs == 0 || self.cycles == 0 || self.tokens_per_cycle == 0 {
            return Err(Error::config("n_runs, cycles and tokens_per_cycle must be positive"));
        }
        Ok(())
    }

    pub fn new_tokens(&self) -> usize {
        self.cycles * self.tokens_per_cycle
    }

    /// Each cycle opens with a consolidation followed by its text span.
    pub fn consolidation_steps(&self) -> BTreeSet<usize> {
        (0..self.cycles).map(|c| c * self.tokens_per_cycle).collect()
    }
}

/// One timed run of one (context, mode) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub context_len: usize,
    pub mode: Mode,
    pub run: usize,
    pub cache_bytes_peak: usize,
    pub final_cache_len: usize,
    pub consolidation_ms_mean: f64,
    pub step_ms_mean: f64,
    pub effective_throughput_tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub context_len: usize,
    pub mode: Mode,
    pub cache_bytes_peak: usize,
    pub consolidation_ms_mean: f64,
    pub consolidation_ms_std: f64,
    pub step_ms_mean: f64,
    pub effective_throughput_tokens_per_s: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub runs: Vec<BenchRun>,
}

impl BenchReport {
    pub fn row(&self, context_len: usize, mode: Mode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.context_len == context_len && r.mode == mode)
    }

    /// Mean consolidation time of segregated over flashmem at one context.
    pub fn consolidation_ratio(&self, context_len: usize) -> Option<f64> {
        let seg = self.row(context_len, Mode::Segregated)?;
        let fm = self.row(context_len, Mode::FlashMem)?;
        Some(seg.consolidation_ms_mean / fm.consolidation_ms_mean)
    }

    /// Rows with every timing column zeroed, for determinism checks.
    pub fn without_timing(&self) -> Vec<BenchRow> {
        self.rows
            .iter()
            .map(|r| BenchRow {
                consolidation_ms_mean: 0.0,
                consolidation_ms_std: 0.0,
                step_ms_mean: 0.0,
                effective_throughput_tokens_per_s: 0.0,
                ..r.clone()
            })
            .collect()
    }
}

/// Deterministic synthetic context of `len` tokens, avoiding PAD and BOS.
pub fn synthetic_prompt(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(len as u64);
    (0..len).map(|_| rng.gen_range(2..vocab_size as u32)).collect()
}

/// Cache bytes the ledger predicts for one cell.
pub fn expected_peak_bytes<T: Scalar>(backbone: &Backbone<T>, k: usize, context_len: usize, mode: Mode, cfg: &BenchConfig) -> usize {
    let bb = backbone.config();
    let per = |len| KvCache::<T>::bytes_for(bb.n_layers, len, bb.layout());
    let n = cfg.new_tokens();
    match mode {
        Mode::Vanilla => per(context_len + n),
        Mode::FlashMem => per(context_len + n + k * cfg.cycles),
        Mode::Segregated => {
            // Live and private caches both hold the history at the last
            // consolidation.
            let last = (cfg.cycles - 1) * (cfg.tokens_per_cycle + k);
            (2 * per(context_len + last)).max(per(context_len + n + k * cfg.cycles))
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize_run<T>(trace: &RunTrace<T>, context_len: usize, run: usize) -> BenchRun {
    let consolidation: Vec<f64> = trace.triggers.iter().map(|t| t.consolidation_ms).collect();
    let total_ms: f64 = trace.steps.iter().map(|s| s.wall_ms).sum();
    let text_ms = total_ms - consolidation.iter().sum::<f64>();
    let n = trace.steps.len() as f64;
    BenchRun {
        context_len,
        mode: trace.mode,
        run,
        cache_bytes_peak: trace.cache_bytes_peak,
        final_cache_len: trace.final_cache_len,
        consolidation_ms_mean: mean_std(&consolidation).0,
        step_ms_mean: text_ms / n,
        effective_throughput_tokens_per_s: n / (total_ms / 1e3),
    }
}

/// Runs every (context, mode) cell `n_runs` times, serially. The prefill
/// is shared by all runs of a context and is not timed.
pub fn bench_cyclic<T: Scalar>(backbone: &Backbone<T>, consolidator: &Consolidator<T>, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let bb = backbone.config();
    let k = consolidator.config().n_memory_tokens;
    for &ctx in &cfg.contexts {
        let needed = ctx + cfg.new_tokens() + k * cfg.cycles;
        if needed > bb.max_positions {
            return Err(Error::Capacity {
                requested: needed,
                capacity: bb.max_positions,
            });
        }
    }
    let engine = Engine::new(backbone, Some(consolidator), Monitor::default())?;
    let mut report = BenchReport::default();
    for &ctx in &cfg.contexts {
        let prompt = synthetic_prompt(ctx, bb.vocab_size, cfg.seed);
        let session = engine.start(&prompt)?;
        for &mode in &cfg.modes {
            let gen = GenerationConfig {
                max_new_tokens: cfg.new_tokens(),
                mode,
                forced_triggers: cfg.consolidation_steps(),
                ..Default::default()
            };
            let mut runs = Vec::with_capacity(cfg.n_runs);
            for run in 0..cfg.n_runs {
                let trace = engine.run_session(session.clone(), &gen)?;
                runs.push(summarize_run(&trace, ctx, run));
            }
            let peak = runs[0].cache_bytes_peak;
            if runs.iter().any(|r| r.cache_bytes_peak != peak) {
                return Err(Error::contract("cache ledger differs between identical runs"));
            }
            let col = |f: fn(&BenchRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
            let (c_mean, c_std) = mean_std(&col(|r| r.consolidation_ms_mean));
            report.rows.push(BenchRow {
                context_len: ctx,
                mode,
                cache_bytes_peak: peak,
                consolidation_ms_mean: c_mean,
                consolidation_ms_std: c_std,
                step_ms_mean: mean_std(&col(|r| r.step_ms_mean)).0,
                effective_throughput_tokens_per_s: mean_std(&col(|r| r.effective_throughput_tokens_per_s)).0,
                n_runs: cfg.n_runs,
            });
            report.runs.extend(runs);
        }
    }
    Ok(report)
}

fn write_csv<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

pub fn write_bench_csv(path: impl AsRef<Path>, report: &BenchReport) -> Result<()> {
    write_csv(path.as_ref(), &report.rows)
}

pub fn read_bench_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    read_csv(path.as_ref())
}

pub fn write_runs_csv(path: impl AsRef<Path>, report: &BenchReport) -> Result<()> {
    write_csv(path.as_ref(), &report.runs)
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRun>> {
    read_csv(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::consolidator::ConsolidatorConfig;

    fn models() -> (Backbone<f32>, Consolidator<f32>) {
        let bb = Backbone::init(BackboneConfig::sized(2, 16, 2), 3).unwrap();
        let c = Consolidator::inherit(&bb, ConsolidatorConfig { n_layers: 1, n_memory_tokens: 8, d_model: 16 }, 4).unwrap();
        (bb, c)
    }

    fn small() -> BenchConfig {
        BenchConfig {
            contexts: vec![16, 48],
            n_runs: 2,
            cycles: 3,
            tokens_per_cycle: 4,
            ..Default::default()
        }
    }

    #[test]
    fn cache_columns_follow_the_ledger() {
        let (bb, c) = models();
        let cfg = small();
        let report = bench_cyclic(&bb, &c, &cfg).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(report.runs.len(), 12);
        let per_pos = KvCache::<f32>::bytes_for(2, 1, bb.config().layout());
        for row in &report.rows {
            assert_eq!(row.cache_bytes_peak, expected_peak_bytes(&bb, 8, row.context_len, row.mode, &cfg));
            assert_eq!(row.n_runs, 2);
        }
        for &ctx in &cfg.contexts {
            let v = report.row(ctx, Mode::Vanilla).unwrap();
            let f = report.row(ctx, Mode::FlashMem).unwrap();
            assert_eq!(v.cache_bytes_peak, (ctx + 12) * per_pos);
            assert_eq!(f.cache_bytes_peak - v.cache_bytes_peak, 3 * 8 * per_pos);
            assert_eq!(v.consolidation_ms_mean, 0.0);
        }
        let runs = report.runs.iter().filter(|r| r.mode == Mode::FlashMem);
        assert!(runs.clone().all(|r| r.final_cache_len == r.context_len + 12 + 24));
    }

    #[test]
    fn cache_columns_are_reproducible_and_csv_round_trips() {
        let (bb, c) = models();
        let a = bench_cyclic(&bb, &c, &small()).unwrap();
        let b = bench_cyclic(&bb, &c, &small()).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bench.csv");
        write_bench_csv(&p, &a).unwrap();
        assert_eq!(read_bench_csv(&p).unwrap(), a.rows);
        let header = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        assert_eq!(
            header,
            "context_len,mode,cache_bytes_peak,consolidation_ms_mean,consolidation_ms_std,step_ms_mean,effective_throughput_tokens_per_s,n_runs"
        );
        let q = dir.path().join("runs.csv");
        write_runs_csv(&q, &a).unwrap();
        assert_eq!(read_runs_csv(&q).unwrap(), a.runs);
    }

    #[test]
    fn overflowing_context_is_a_capacity_error() {
        let (bb, c) = models();
        let cfg = BenchConfig { contexts: vec![bb.config().max_positions - 10], ..small() };
        assert!(matches!(bench_cyclic(&bb, &c, &cfg), Err(Error::Capacity { .. })));
    }

    #[test]
    fn prompts_are_seeded() {
        assert_eq!(synthetic_prompt(64, 256, 1), synthetic_prompt(64, 256, 1));
        assert_ne!(synthetic_prompt(64, 256, 1), synthetic_prompt(64, 256, 2));
        assert!(synthetic_prompt(500, 256, 0).iter().all(|&t| (2..256).contains(&t)));
    }
}
