//! Attention-entropy monitor.
//!
//! Reads the last layer's attention row for the newest token, drops the sink
//! positions, renormalizes per head and averages the per-head Shannon entropy
//! (nats). A step triggers consolidation when that average strictly exceeds a
//! threshold calibrated as a nearest-rank percentile of observed entropies.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Tolerance on the input row sums accepted by [`mask_and_renormalize`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Absolute cache positions excluded from the entropy.
    pub sink_indices: BTreeSet<usize>,
    /// `None` until calibrated or set; `+inf` disables triggering.
    pub threshold: Option<f64>,
    pub percentile_target: f64,
    /// Non-sink mass below this marks a head as degenerate.
    pub epsilon_mass: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            sink_indices: BTreeSet::from([0]),
            threshold: None,
            percentile_target: 85.0,
            epsilon_mass: 1e-8,
        }
    }
}

impl MonitorConfig {
    pub fn with_threshold(mut self, tau: f64) -> Self {
        self.threshold = Some(tau);
        self
    }

    /// Treat the first `count` cache positions as sinks.
    pub fn with_leading_sinks(mut self, count: usize) -> Self {
        self.sink_indices = (0..count).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.threshold {
            if t.is_nan() || t < 0.0 {
                return Err(Error::config(format!("threshold must be >= 0, got {t}")));
            }
        }
        if !(self.percentile_target > 0.0 && self.percentile_target <= 100.0) {
            return Err(Error::config(format!(
                "percentile_target must lie in (0, 100], got {}",
                self.percentile_target
            )));
        }
        if !(self.epsilon_mass >= 0.0 && self.epsilon_mass.is_finite()) {
            return Err(Error::config("epsilon_mass must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Output of [`mask_and_renormalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAttention {
    /// `[n_heads, cache_len]`, sink columns zero.
    pub weights: Tensor<f64>,
    /// Per head: true when the non-sink mass fell below `epsilon_mass`. Such
    /// rows are left all-zero and contribute zero entropy.
    pub degenerate: Vec<bool>,
}

impl MaskedAttention {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

fn check_attention<T: Scalar>(a: &Tensor<T>) -> Result<(usize, usize)> {
    if a.shape().len() != 2 || a.shape()[0] == 0 || a.shape()[1] == 0 {
        return Err(Error::contract(format!(
            "attention must be a non-empty [n_heads, cache_len] matrix, got {:?}",
            a.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

pub fn mask_and_renormalize<T: Scalar>(
    attention: &Tensor<T>,
    sinks: &BTreeSet<usize>,
    epsilon_mass: f64,
) -> Result<MaskedAttention> {
    let (heads, len) = check_attention(attention)?;
    let mut out = Vec::with_capacity(heads * len);
    let mut degenerate = Vec::with_capacity(heads);
    for h in 0..heads {
        let row = attention.row(h);
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::contract(format!(
                "attention head {h} is not a distribution (sum {total})"
            )));
        }
        let masked: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, v)| if sinks.contains(&j) { 0.0 } else { v.as_f64() })
            .collect();
        let mass: f64 = masked.iter().sum();
        if mass < epsilon_mass || mass <= 0.0 {
            degenerate.push(true);
            out.extend(std::iter::repeat(0.0).take(len));
        } else {
            degenerate.push(false);
            out.extend(masked.iter().map(|v| v / mass));
        }
    }
    Ok(MaskedAttention {
        weights: Tensor::from_parts(vec![heads, len], out),
        degenerate,
    })
}

/// Shannon entropy in nats of one (possibly unnormalized-to-zero) row.
fn entropy(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    // Rounding can push a one-hot row a hair below zero.
    h.max(0.0)
}

/// Returns `(H_t, per_head)`: per-head entropy over non-sink positions and
/// their arithmetic mean.
pub fn aggregate_entropy(masked: &Tensor<f64>, sinks: &BTreeSet<usize>) -> Result<(f64, Vec<f64>)> {
    let (heads, len) = check_attention(masked)?;
    let per_head: Vec<f64> = (0..heads)
        .map(|h| {
            let row: Vec<f64> = masked
                .row(h)
                .iter()
                .enumerate()
                .map(|(j, &p)| if sinks.contains(&j) { 0.0 } else { p })
                .collect();
            debug_assert_eq!(row.len(), len);
            entropy(&row)
        })
        .collect();
    let mean = per_head.iter().sum::<f64>() / heads as f64;
    Ok((mean, per_head))
}

pub fn should_trigger(entropy: f64, config: &MonitorConfig) -> Result<bool> {
    match config.threshold {
        Some(tau) => Ok(entropy > tau),
        None => Err(Error::config("monitor threshold is not set; calibrate or pass one")),
    }
}

/// Nearest-rank percentile: the `ceil(P/100 · N)`-th smallest value, rank
/// clamped to `[1, N]`.
pub fn calibrate_threshold(entropies: &[f64], percentile_target: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::contract("cannot calibrate a threshold from an empty sample"));
    }
    if !(percentile_target > 0.0 && percentile_target <= 100.0) {
        return Err(Error::config(format!(
            "percentile_target must lie in (0, 100], got {percentile_target}"
        )));
    }
    if entropies.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibrate_threshold"));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile_target / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// One monitored decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub step: usize,
    pub entropy: f64,
    pub triggered: bool,
    pub per_head_entropy: Vec<f64>,
    #[serde(default)]
    pub degenerate: bool,
}

/// Stateless wrapper tying a [`MonitorConfig`] to the observe loop.
#[derive(Debug, Clone, Default)]
pub struct Monitor {
    config: MonitorConfig,
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Monitor { config })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn set_threshold(&mut self, tau: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.threshold = Some(tau);
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Entropy of an attention row without a trigger decision.
    pub fn entropy<T: Scalar>(&self, attention: &Tensor<T>) -> Result<(f64, Vec<f64>, bool)> {
        let masked = mask_and_renormalize(attention, &self.config.sink_indices, self.config.epsilon_mass)?;
        let (h, per_head) = aggregate_entropy(&masked.weights, &self.config.sink_indices)?;
        Ok((h, per_head, masked.any_degenerate()))
    }

    pub fn observe<T: Scalar>(&self, step: usize, attention: &Tensor<T>) -> Result<EntropyRecord> {
        let (entropy, per_head_entropy, degenerate) = self.entropy(attention)?;
        let triggered = should_trigger(entropy, &self.config)?;
        Ok(EntropyRecord {
            step,
            entropy,
            triggered,
            per_head_entropy,
            degenerate,
        })
    }

    /// The monitor has no learned state.
    pub fn parameters(&self) -> Vec<&Parameter<f64>> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sinks0() -> BTreeSet<usize> {
        BTreeSet::from([0])
    }

    fn t(rows: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, v.len() / rows], v.to_vec()).unwrap()
    }

    #[test]
    fn masks_single_sink() {
        let m = mask_and_renormalize(&t(1, &[0.9, 0.06, 0.04]), &sinks0(), 1e-8).unwrap();
        let w = m.weights.data();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.6).abs() < 1e-12 && (w[2] - 0.4).abs() < 1e-12);
        assert!(!m.any_degenerate());
    }

    #[test]
    fn no_sinks_is_identity_and_masking_is_idempotent() {
        let a = t(2, &[0.1, 0.2, 0.7, 0.25, 0.25, 0.5]);
        let m = mask_and_renormalize(&a, &BTreeSet::new(), 1e-8).unwrap();
        assert!(m.weights.max_abs_diff(&a) < 1e-15);
        let once = mask_and_renormalize(&a, &sinks0(), 1e-8).unwrap().weights;
        let twice = mask_and_renormalize(&once, &sinks0(), 1e-8).unwrap().weights;
        assert!(once.max_abs_diff(&twice) < 1e-15);
    }

    #[test]
    fn all_mass_on_sink_is_degenerate_zero_entropy() {
        let cfg = MonitorConfig::default().with_threshold(0.0);
        let mon = Monitor::new(cfg).unwrap();
        let rec = mon.observe(3, &t(2, &[1.0, 0.0, 0.0, 0.5, 0.25, 0.25])).unwrap();
        assert!(rec.degenerate);
        assert_eq!(rec.per_head_entropy[0], 0.0);
        assert!((rec.per_head_entropy[1] - 2f64.ln()).abs() < 1e-12);
        assert!(rec.triggered);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(matches!(
            mask_and_renormalize(&t(1, &[0.5, 0.6]), &sinks0(), 1e-8),
            Err(Error::Contract(_))
        ));
        assert!(mask_and_renormalize(&Tensor::<f64>::zeros(&[0, 3]), &sinks0(), 1e-8).is_err());
    }

    #[test]
    fn entropy_worked_values() {
        let none = BTreeSet::new();
        let (h, _) = aggregate_entropy(&t(1, &[0.0, 1.0, 0.0]), &none).unwrap();
        assert_eq!(h, 0.0);
        let (h, _) = aggregate_entropy(&t(1, &[0.25; 4]), &none).unwrap();
        assert!((h - 1.386294).abs() < 1e-6);
        let (h, _) = aggregate_entropy(&t(1, &[0.6, 0.4]), &none).unwrap();
        assert!((h - 0.67301).abs() < 1e-5);
        // Independent oracle for the mean: heads with entropies ln 2 and ln 4.
        let (h, per) = aggregate_entropy(&t(2, &[0.5, 0.5, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]), &none).unwrap();
        assert!((per[0] - 2f64.ln()).abs() < 1e-12);
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn trigger_is_strict() {
        let cfg = MonitorConfig::default().with_threshold(1.0);
        assert!(should_trigger(1.2, &cfg).unwrap());
        assert!(!should_trigger(1.0, &cfg).unwrap());
        let vanilla = MonitorConfig::default().with_threshold(f64::INFINITY);
        assert!(!should_trigger(1e300, &vanilla).unwrap());
        assert!(matches!(should_trigger(1.0, &MonitorConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&v, 85.0).unwrap(), 17.0);
        assert_eq!(calibrate_threshold(&v, 100.0).unwrap(), 20.0);
        assert_eq!(calibrate_threshold(&v, 0.1).unwrap(), 1.0);
        assert_eq!(calibrate_threshold(&[0.7; 9], 85.0).unwrap(), 0.7);
        assert!(matches!(calibrate_threshold(&[], 85.0), Err(Error::Contract(_))));
        assert!(matches!(calibrate_threshold(&v, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(MonitorConfig::default().with_threshold(-1.0).validate().is_err());
        let bad = MonitorConfig { percentile_target: 101.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(MonitorConfig::default().with_leading_sinks(3).sink_indices.len(), 3);
        assert!(Monitor::default().parameters().is_empty());
    }

    fn distribution(max_len: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..5, 1usize..max_len).prop_flat_map(|(heads, len)| {
            (Just(heads), prop::collection::vec(0.0f64..1.0, heads * len)).prop_map(move |(h, raw)| {
                let mut out = raw;
                for row in out.chunks_mut(len) {
                    let s: f64 = row.iter().sum::<f64>() + 1e-12;
                    row.iter_mut().for_each(|v| *v /= s);
                    // Exact unit sum keeps the contract check honest.
                    let fix: f64 = 1.0 - row.iter().sum::<f64>();
                    row[0] += fix;
                    if row[0] < 0.0 {
                        row[0] = 0.0;
                    }
                }
                (h, out)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1200))]

        #[test]
        fn entropy_is_bounded((heads, data) in distribution(40), n_sinks in 0usize..3) {
            let len = data.len() / heads;
            let a = t(heads, &data);
            let sinks: BTreeSet<usize> = (0..n_sinks).collect();
            let m = mask_and_renormalize(&a, &sinks, 1e-8).unwrap();
            let (h, per) = aggregate_entropy(&m.weights, &sinks).unwrap();
            let n_valid = len - sinks.iter().filter(|&&s| s < len).count();
            let bound = if n_valid == 0 { 0.0 } else { (n_valid as f64).ln() };
            prop_assert!(h >= 0.0);
            prop_assert!(h <= bound + 1e-9, "h={h} bound={bound}");
            prop_assert!(per.iter().all(|&p| p >= 0.0 && p <= bound + 1e-9));
        }
    }

    proptest! {
        #[test]
        fn masking_preserves_ratios((heads, data) in distribution(20)) {
            let len = data.len() / heads;
            let a = t(heads, &data);
            let sinks = sinks0();
            let m = mask_and_renormalize(&a, &sinks, 1e-8).unwrap();
            for h in 0..heads {
                if m.degenerate[h] { continue; }
                for j in 1..len {
                    for k in 1..len {
                        let ak = a.get(&[h, k]);
                        if ak > 1e-6 {
                            let lhs = m.weights.get(&[h, j]) / m.weights.get(&[h, k]);
                            let rhs = a.get(&[h, j]) / ak;
                            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
                        }
                    }
                }
            }
        }

        #[test]
        fn percentile_is_monotone_and_order_free(
            values in prop::collection::vec(-10.0f64..10.0, 1..60),
            p1 in 0.5f64..100.0,
            p2 in 0.5f64..100.0,
            seed in any::<u64>(),
        ) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(calibrate_threshold(&values, lo).unwrap() <= calibrate_threshold(&values, hi).unwrap());
            let mut shuffled = values.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(calibrate_threshold(&values, lo).unwrap(), calibrate_threshold(&shuffled, lo).unwrap());
        }

        #[test]
        fn lowering_tau_never_drops_triggers(
            trace in prop::collection::vec(0.0f64..4.0, 1..80),
            tau in 0.0f64..4.0,
            delta in 0.0f64..2.0,
        ) {
            let hi = MonitorConfig::default().with_threshold(tau + delta);
            let lo = MonitorConfig::default().with_threshold(tau);
            for &h in &trace {
                if should_trigger(h, &hi).unwrap() {
                    prop_assert!(should_trigger(h, &lo).unwrap());
                }
            }
        }
    }
}
