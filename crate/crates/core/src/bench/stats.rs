//! Entropy reduction after memory injection, measured against a vanilla
//! counterfactual at the same step indices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::TraceLog;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub window_len: usize,
    /// Only triggers at steps strictly greater than this count.
    pub min_step: usize,
    pub tau_sig: f64,
    /// Keep windows that run past the end of a trace, averaging what exists.
    pub keep_truncated: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            window_len: 10,
            min_step: 5,
            tau_sig: 0.5,
            keep_truncated: false,
        }
    }
}

/// One scored trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerDelta {
    pub trace_id: String,
    pub step: usize,
    pub vanilla_mean: f64,
    pub flashmem_mean: f64,
    pub delta: f64,
}

impl TriggerDelta {
    pub fn relative_pct(&self) -> f64 {
        self.delta / self.vanilla_mean * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean_delta: f64,
    pub mean_relative_pct: f64,
    pub std_relative_pct: f64,
    pub delta_range: (f64, f64),
    pub prob_reduction: f64,
    pub prob_significant: f64,
    pub n_triggers: usize,
    pub deltas: Vec<TriggerDelta>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pairs traces by id. Returns `Ok(None)` when no trigger yields a full
/// window; an id present on only one side is a contract error.
pub fn entropy_stats(
    vanilla: &BTreeMap<String, TraceLog>,
    flashmem: &BTreeMap<String, TraceLog>,
    cfg: &StatsConfig,
) -> Result<Option<EntropyStats>> {
    if cfg.window_len == 0 {
        return Err(Error::config("window_len must be positive"));
    }
    if let Some(id) = vanilla.keys().find(|k| !flashmem.contains_key(*k)) {
        return Err(Error::contract(format!("vanilla trace `{id}` has no flashmem partner")));
    }
    if let Some(id) = flashmem.keys().find(|k| !vanilla.contains_key(*k)) {
        return Err(Error::contract(format!("flashmem trace `{id}` has no vanilla partner")));
    }
    let mut deltas = Vec::new();
    for (id, fm) in flashmem {
        let h_v = vanilla[id].entropies();
        let h_f = fm.entropies();
        let len = h_v.len().min(h_f.len());
        for t in fm.trigger_steps() {
            if t <= cfg.min_step || t >= len {
                continue;
            }
            let end = t + cfg.window_len;
            if end > len && !cfg.keep_truncated {
                continue;
            }
            let end = end.min(len);
            let (v, f) = (mean(&h_v[t..end]), mean(&h_f[t..end]));
            deltas.push(TriggerDelta {
                trace_id: id.clone(),
                step: t,
                vanilla_mean: v,
                flashmem_mean: f,
                delta: v - f,
            });
        }
    }
    if deltas.is_empty() {
        return Ok(None);
    }
    let d: Vec<f64> = deltas.iter().map(|x| x.delta).collect();
    let rel: Vec<f64> = deltas.iter().map(TriggerDelta::relative_pct).collect();
    let n = d.len() as f64;
    let rel_mean = mean(&rel);
    let rel_std = if rel.len() > 1 {
        (rel.iter().map(|r| (r - rel_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Some(EntropyStats {
        mean_delta: mean(&d),
        mean_relative_pct: rel_mean,
        std_relative_pct: rel_std,
        delta_range: (d.iter().cloned().fold(f64::INFINITY, f64::min), d.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        prob_reduction: d.iter().filter(|&&x| x > 0.0).count() as f64 / n,
        prob_significant: d.iter().filter(|&&x| x > cfg.tau_sig).count() as f64 / n,
        n_triggers: deltas.len(),
        deltas,
    }))
}
