//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers (`3 7`) to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use flashmem::backbone::{Backbone, BackboneConfig, KvCache, StepInput};
use flashmem::bench::{bench_cyclic, depth_plots, depth_sweep, entropy_stats, expected_peak_bytes, read_sweep_csv, write_sweep_csv};
use flashmem::bench::{BenchConfig, StatsConfig, SweepConfig};
use flashmem::checkpoint::{load_checkpoint, save_checkpoint};
use flashmem::consolidator::{Consolidator, ConsolidatorConfig};
use flashmem::engine::{inject, Engine, GenerationConfig, Mode, RunTrace, Sampling, StepRecord, TraceLog, TriggerRecord};
use flashmem::monitor::{aggregate_entropy, calibrate_threshold, mask_and_renormalize, Monitor, MonitorConfig};
use flashmem::tensor::Tensor;
use flashmem::trainer::{
    accumulate_batch_gradients, make_synthetic_dataset, prepare_all, score_example, train_and_evaluate, Prepared,
    SyntheticTaskSpec, TrainConfig, Trainer, TrainingExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Fail(String);

impl From<flashmem::Error> for Fail {
    fn from(e: flashmem::Error) -> Self {
        Fail(format!("error: {e}"))
    }
}

type Outcome = Result<String, Fail>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(Fail(format!($($fmt)*)));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

// 1 ------------------------------------------------------------------------

fn autodiff_end_to_end() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let bb = Backbone::<f64>::init(BackboneConfig::sized(2, 16, 2), 101)?;
    let mut c = Consolidator::inherit(&bb, ConsolidatorConfig { n_layers: 1, n_memory_tokens: 2, d_model: 16 }, 7)?;
    let spec = SyntheticTaskSpec { n_pairs: 3, distractor_len: 6, seed: 3, ..Default::default() };
    let mut examples = prepare_all(&bb, &make_synthetic_dataset(&spec, 256, 3, 1)?.train)?;
    let multi = TrainingExample { x: vec![1, 104, 61, 66, 59, 150, 63, 104], y: vec![66, 59, 70] };
    examples.push(Prepared::new(&bb, multi)?);
    let batch: Vec<&Prepared<f64>> = examples.iter().collect();

    c.zero_grad();
    accumulate_batch_gradients(&bb, &mut c, &batch)?;
    let frozen = bb.parameters().iter().all(|p| !p.trainable() && p.grad().data().iter().all(|&g| g == 0.0));
    ensure!(frozen, "a backbone parameter is trainable or holds a non-zero gradient");

    let n_targets: usize = examples.iter().map(|p| p.example.y.len()).sum();
    let objective = |c: &Consolidator<f64>| -> flashmem::Result<f64> {
        let mut s = 0.0;
        for p in &examples {
            s += score_example(&bb, Some(c), p)?.nll_sum;
        }
        Ok(s / n_targets as f64)
    };
    let sizes: Vec<usize> = c.parameters().iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut floored = 0;
    let picks = rand::seq::index::sample(&mut r, total, 24);
    for flat in picks.iter() {
        let (mut pi, mut idx) = (0, flat);
        while idx >= sizes[pi] {
            idx -= sizes[pi];
            pi += 1;
        }
        let analytic = c.parameters()[pi].grad().data()[idx];
        let original = c.parameters()[pi].value().clone();
        c.parameters_mut()[pi].perturb(idx, H);
        let fp = objective(&c)?;
        c.parameters_mut()[pi].set_value(original.clone())?;
        c.parameters_mut()[pi].perturb(idx, -H);
        let fm = objective(&c)?;
        c.parameters_mut()[pi].set_value(original)?;
        let numeric = (fp - fm) / (2.0 * H);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            floored += 1;
            ensure!((analytic - numeric).abs() < 1e-9, "{}[{idx}]: {analytic} vs {numeric}", c.parameters()[pi].name());
        } else {
            let rel = (analytic - numeric).abs() / scale;
            worst = worst.max(rel);
            ensure!(rel < 1e-4, "{}[{idx}]: analytic {analytic} numeric {numeric} rel {rel:.2e}", c.parameters()[pi].name());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "24 params, worst rel err {worst:.2e} ({floored} below the 1e-7 floor), backbone grads zero, {secs:.1} s"
    ))
}

// 2 ------------------------------------------------------------------------

fn cache_fidelity() -> Outcome {
    let bb = Backbone::<f32>::init(BackboneConfig::default(), 202)?;
    let vocab = bb.config().vocab_size;
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let len = r.gen_range(1..=64);
        let tokens = random_tokens(&mut r, len, vocab);
        let full = bb.forward_full(&tokens)?;
        let (mut cache, first) = bb.prefill(&tokens[..1])?;
        worst = worst.max(max_abs_diff(first.logits.data(), full.row(0)));
        for (i, &t) in tokens.iter().enumerate().skip(1) {
            let out = bb.decode_step(StepInput::Token(t), &mut cache)?;
            worst = worst.max(max_abs_diff(out.logits.data(), full.row(i)));
        }
        let (_, whole) = bb.prefill(&tokens)?;
        worst = worst.max(max_abs_diff(whole.logits.data(), full.row(len - 1)));
    }
    ensure!(worst < 1e-5, "max |Δ| = {worst:.3e}");
    Ok(format!("50 prompts, max |Δ| = {worst:.3e}"))
}

// 3 ------------------------------------------------------------------------

/// `softmax((x·W_Q)·Kᵀ/√d_head)·V` per head, then `·W_O`, from raw tensors.
fn cross_attention_oracle(x: &[f64], n: usize, wq: &Tensor<f64>, wo: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let d = wq.rows();
    let dh = d / heads;
    let len = k.shape()[0];
    let matmul = |a: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|m| a[i * d + m] * w.row(m)[j]).sum();
            }
        }
        out
    };
    let q = matmul(x, wq);
    let mut o = vec![0.0; n * d];
    for i in 0..n {
        for h in 0..heads {
            // Cache tensors are [len, n_heads, d_head].
            let at = |t: &Tensor<f64>, pos: usize, e: usize| t.data()[(pos * heads + h) * dh + e];
            let scores: Vec<f64> = (0..len)
                .map(|p| (0..dh).map(|e| q[i * d + h * dh + e] * at(k, p, e)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for e in 0..dh {
                o[i * d + h * dh + e] = (0..len).map(|p| w[p] / z * at(v, p, e)).sum();
            }
        }
    }
    matmul(&o, wo)
}

fn shared_kv_fidelity() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut with_latents = 0;
    for case in 0..100u64 {
        let n_layers = r.gen_range(2..=4);
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let bb = Backbone::<f64>::init(BackboneConfig::sized(n_layers, 16, heads), case)?;
        let l = r.gen_range(1..n_layers);
        let c = Consolidator::inherit(&bb, ConsolidatorConfig { n_layers: l, n_memory_tokens: 2, d_model: 16 }, case + 1000)?;
        let len = r.gen_range(1..=40);
        let prompt = random_tokens(&mut r, len, 256);
        let (mut cache, out) = bb.prefill(&prompt)?;
        let calls = bb.forward_calls();
        let memory = c.generate(out.last_hidden.data(), &cache, prompt.len(), 0.0)?;
        ensure!(bb.forward_calls() == calls, "generate ran a backbone forward pass");
        if case % 2 == 1 {
            inject(&memory, &bb, &mut cache)?;
            with_latents += 1;
        }
        let li = r.gen_range(0..l);
        let layer = &c.layers[li];
        ensure!(layer.source_layer == n_layers - l + li, "layer {li} reads cache layer {}", layer.source_layer);
        let n = r.gen_range(1..=4);
        let x = normal(&mut r, n * 16);
        let got = c.cross_attend(li, &x, &cache)?;
        let want = cross_attention_oracle(
            &x,
            n,
            layer.cross_wq.value(),
            layer.cross_wo.value(),
            &cache.keys_tensor(layer.source_layer),
            &cache.values_tensor(layer.source_layer),
            heads,
        );
        worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure!(worst < 1e-6, "max |Δ| = {worst:.3e}");
    Ok(format!("100 cases ({with_latents} with injected latents), max |Δ| = {worst:.3e}, zero forward passes in generate"))
}

// 4 ------------------------------------------------------------------------

fn monitor_exactness() -> Outcome {
    let monitor = Monitor::new(MonitorConfig::default())?;
    let uniform = Tensor::<f64>::new(vec![1, 5], vec![0.2; 5])?;
    let (h_uniform, _, _) = monitor.entropy(&uniform)?;
    ensure!((h_uniform - 4f64.ln()).abs() < 1e-12, "uniform over 4 gave {h_uniform}");
    let skewed = Tensor::<f64>::new(vec![1, 3], vec![0.5, 0.3, 0.2])?;
    let (h_skewed, _, _) = monitor.entropy(&skewed)?;
    ensure!((h_skewed - 0.67301).abs() < 1e-4, "[0.6, 0.4] gave {h_skewed}");

    let mut r = rng(4);
    let mut checked = 0;
    for _ in 0..200 {
        let heads = r.gen_range(1..=4);
        let len = r.gen_range(1..=12);
        let mut data = Vec::new();
        for _ in 0..heads {
            let w: Vec<f64> = normal(&mut r, len).iter().map(|v| (3.0 * v).exp()).collect();
            let z: f64 = w.iter().sum();
            data.extend(w.iter().map(|v| v / z));
        }
        let sinks: BTreeSet<usize> = (0..len).filter(|_| r.gen_bool(0.25)).collect();
        let attn = Tensor::new(vec![heads, len], data)?;
        let masked = mask_and_renormalize(&attn, &sinks, 1e-12)?;
        let (_, per_head) = aggregate_entropy(&masked.weights, &sinks)?;
        let n_valid = len - sinks.len();
        for h in 0..heads {
            let row = masked.weights.row(h);
            ensure!(sinks.iter().all(|&s| row[s] == 0.0), "sink kept mass");
            if masked.degenerate[h] {
                ensure!(n_valid == 0 || row.iter().all(|&p| p == 0.0), "degenerate row not zeroed");
                continue;
            }
            let sum: f64 = row.iter().sum();
            ensure!((sum - 1.0).abs() < 1e-12, "renormalized row sums to {sum}");
            let bound = (n_valid as f64).ln();
            ensure!(per_head[h] >= 0.0 && per_head[h] <= bound + 1e-12, "H = {} outside [0, ln {n_valid}]", per_head[h]);
            checked += 1;
        }
    }
    let shuffled = [7.0, 3.0, 19.0, 1.0, 12.0, 20.0, 5.0, 17.0, 9.0, 14.0, 2.0, 16.0, 11.0, 8.0, 18.0, 4.0, 13.0, 6.0, 15.0, 10.0];
    let tau = calibrate_threshold(&shuffled, 85.0)?;
    ensure!(tau == 17.0, "percentile gave {tau}");
    Ok(format!("ln 4 = {h_uniform:.6}, [0.6, 0.4] -> {h_skewed:.6}, {checked} fuzzed heads within bounds, tau = {tau}"))
}

// 5 ------------------------------------------------------------------------

fn ledger_holds(t: &RunTrace<f32>, k: usize) -> Result<(), Fail> {
    let expect = t.prompt_tokens.len() + t.generated_tokens.len() + k * t.triggers.len();
    ensure!(t.final_cache_len == expect, "cache {} != {expect}", t.final_cache_len);
    ensure!(t.latent_flags.len() == t.final_cache_len, "flag count mismatch");
    let mut want = vec![false; t.final_cache_len];
    for e in &t.triggers {
        ensure!(e.memory.len() == k, "trigger carried {} latents", e.memory.len());
        for f in &mut want[e.cache_len_before..e.cache_len_before + k] {
            ensure!(!*f, "overlapping latent spans");
            *f = true;
        }
    }
    ensure!(want == t.latent_flags, "is_latent flags do not match trigger events");
    let flagged: Vec<usize> = t.steps.iter().filter(|s| s.triggered).map(|s| s.step).collect();
    let events: Vec<usize> = t.triggers.iter().map(|e| e.step).collect();
    ensure!(flagged == events, "step flags {flagged:?} vs triggers {events:?}");
    Ok(())
}

fn algorithm_conformance() -> Outcome {
    let bb = Backbone::<f32>::init(BackboneConfig::default(), 303)?;
    let c = Consolidator::inherit(&bb, ConsolidatorConfig::for_backbone(bb.config()), 304)?;
    let k = c.config().n_memory_tokens;
    let mut r = rng(5);
    let prompts: Vec<Vec<u32>> = (0..50).map(|_| {
        let len = r.gen_range(1..=64);
        random_tokens(&mut r, len, 256)
    }).collect();
    let gen = GenerationConfig { max_new_tokens: 24, trigger_cooldown: 4, min_trigger_step: 2, ..Default::default() };

    let plain = Engine::new(&bb, None, Monitor::default())?;
    let mut entropies = Vec::new();
    for p in &prompts {
        let t = plain.run(p, &GenerationConfig { mode: Mode::Vanilla, ..gen.clone() })?;
        ensure!(t.generated_tokens == bb.greedy_decode(p, 24)?, "vanilla diverged from greedy decoding");
        ensure!(t.triggers.is_empty(), "vanilla consolidated");
        ledger_holds(&t, k)?;
        entropies.extend(t.log().entropies());
    }
    let tau = calibrate_threshold(&entropies, 85.0)?;
    let engine = Engine::new(&bb, Some(&c), Monitor::new(MonitorConfig::default().with_threshold(tau))?)?;
    let mut traces = 0;
    let mut triggers = 0;
    for (i, p) in prompts.iter().enumerate() {
        let mut cfg = gen.clone();
        if i % 5 == 0 {
            cfg.forced_triggers = BTreeSet::from([0, 1, 23]);
        }
        for mode in [Mode::FlashMem, Mode::Segregated] {
            let t = engine.run(p, &GenerationConfig { mode, ..cfg.clone() })?;
            ledger_holds(&t, k)?;
            traces += 1;
            triggers += t.triggers.len();
        }
    }
    ensure!(triggers > 0, "no trigger fired");
    Ok(format!("50/50 vanilla traces match greedy; ledger and flags hold on {traces} gated traces ({triggers} triggers)"))
}

// 6 ------------------------------------------------------------------------

fn efficiency_trend() -> Outcome {
    let bb = Backbone::<f32>::init(BackboneConfig::default(), 0)?;
    let c = Consolidator::inherit(&bb, ConsolidatorConfig::for_backbone(bb.config()), 0)?;
    let cfg = BenchConfig { contexts: vec![256, 1024, 4096], n_runs: 30, ..Default::default() };
    let report = bench_cyclic(&bb, &c, &cfg)?;
    let per_pos = KvCache::<f32>::bytes_for(bb.config().n_layers, 1, bb.config().layout());
    let k = c.config().n_memory_tokens;
    let mut ratios = Vec::new();
    let mut seg_bytes = Vec::new();
    for &ctx in &cfg.contexts {
        let row = |m| report.row(ctx, m).ok_or_else(|| Fail(format!("missing row {ctx} {m}")));
        let (v, f, s) = (row(Mode::Vanilla)?, row(Mode::FlashMem)?, row(Mode::Segregated)?);
        ensure!(
            f.cache_bytes_peak - v.cache_bytes_peak == 64 * per_pos,
            "ctx {ctx}: flashmem overhead {} bytes, want {}",
            f.cache_bytes_peak - v.cache_bytes_peak,
            64 * per_pos
        );
        let ledger = expected_peak_bytes(&bb, k, ctx, Mode::Segregated, &cfg);
        ensure!(s.cache_bytes_peak == ledger, "ctx {ctx}: segregated {} != ledger {ledger}", s.cache_bytes_peak);
        ratios.push(s.consolidation_ms_mean / f.consolidation_ms_mean);
        seg_bytes.push(s.cache_bytes_peak);
    }
    let slope_a = (seg_bytes[1] - seg_bytes[0]) as f64 / (1024.0 - 256.0);
    let slope_b = (seg_bytes[2] - seg_bytes[1]) as f64 / (4096.0 - 1024.0);
    ensure!(slope_a == slope_b && slope_a > 0.0, "segregated footprint not linear: {slope_a} vs {slope_b} bytes/position");
    let shown = format!("{:.2} / {:.2} / {:.2}", ratios[0], ratios[1], ratios[2]);
    ensure!(ratios.windows(2).all(|w| w[1] > w[0]), "ratios not increasing: {shown}");
    ensure!(ratios[2] >= 3.0, "ratio at 4096 is {:.2}", ratios[2]);
    Ok(format!(
        "segregated/flashmem consolidation ratio {shown} at 256/1024/4096; overhead 64 x {per_pos} B at every context; segregated slope {slope_a} B/position"
    ))
}

// 7 ------------------------------------------------------------------------

fn learning_effect() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 0..3u64 {
        let bb = Backbone::<f32>::init(BackboneConfig::default(), seed)?;
        let spec = SyntheticTaskSpec { n_pairs: 8, distractor_len: 64, seed, ..Default::default() };
        let split = make_synthetic_dataset(&spec, 256, 2000, 200)?;
        let train = prepare_all(&bb, &split.train)?;
        let heldout = prepare_all(&bb, &split.heldout)?;
        let cfg = TrainConfig { seed, ..TrainConfig::desk() };
        let (_, report) = train_and_evaluate(&bb, &train, &heldout, &cfg)?;
        let rel = report.relative_improvement();
        if rel >= 0.10 {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: CE {:.3} -> {:.3} ({:+.1}%)",
            report.heldout_without_memory.mean_ce,
            report.heldout_with_memory.mean_ce,
            -100.0 * rel
        ));
    }
    let summary = lines.join("; ");
    ensure!(wins >= 2, "{wins}/3 seeds reach 10%: {summary}");

    let bb = Backbone::<f32>::init(BackboneConfig::default(), 0)?;
    let spec = SyntheticTaskSpec { n_pairs: 8, distractor_len: 64, seed: 9, ..Default::default() };
    let examples = prepare_all(&bb, &make_synthetic_dataset(&spec, 256, 64, 1)?.train)?;
    let batch: Vec<&Prepared<f32>> = examples.iter().collect();
    let cfg = TrainConfig::desk();
    let mut c = Consolidator::inherit(&bb, cfg.consolidator_config(bb.config().d_model), 0)?;
    let mut trainer = Trainer::new(&bb, &mut c, cfg, 500)?;
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 1..=500 {
        last = trainer.train_step(&batch)?.loss;
        if last < 0.1 {
            reached = Some(step);
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let Some(step) = reached else {
        return Err(Fail(format!("{summary}; single batch of 64 still at loss {last:.3} after 500 steps")));
    };
    ensure!(secs < 15.0 * 60.0, "took {secs:.0} s");
    Ok(format!("{wins}/3 seeds >= 10% ({summary}); batch of 64 overfit to {last:.3} at step {step}; {secs:.0} s"))
}

// 8 ------------------------------------------------------------------------

fn trace(entropies: &[f64], triggers: &[usize]) -> TraceLog {
    TraceLog {
        steps: entropies
            .iter()
            .enumerate()
            .map(|(i, &h)| StepRecord {
                step: i,
                token: 0,
                entropy: h,
                triggered: triggers.contains(&i),
                wall_ms: 0.0,
                cache_len: i + 1,
                per_head_entropy: Vec::new(),
                degenerate: false,
            })
            .collect(),
        triggers: triggers.iter().map(|&s| TriggerRecord { step: s, entropy: entropies[s], k: 8, consolidation_ms: 0.0 }).collect(),
    }
}

fn statistics_pipeline() -> Outcome {
    // Two traces, three triggers, reductions -0.1, 0.2 and 0.6 over the
    // ten steps starting at each trigger.
    let base = |n: usize, phase: usize| -> Vec<f64> { (0..n).map(|i| 2.0 + 0.1 * ((i + phase) % 3) as f64).collect() };
    let shift = |h: &mut [f64], at: usize, by: f64| h[at..at + 10].iter_mut().for_each(|v| *v -= by);
    let (va, vb) = (base(40, 0), base(30, 1));
    let (mut fa, mut fb) = (va.clone(), vb.clone());
    shift(&mut fa, 8, -0.1);
    shift(&mut fa, 22, 0.2);
    shift(&mut fb, 12, 0.6);
    let vanilla = BTreeMap::from([("a".to_string(), trace(&va, &[])), ("b".to_string(), trace(&vb, &[]))]);
    let flashmem = BTreeMap::from([("a".to_string(), trace(&fa, &[8, 22])), ("b".to_string(), trace(&fb, &[12]))]);
    let stats = entropy_stats(&vanilla, &flashmem, &StatsConfig::default())?.ok_or_else(|| Fail("no trigger scored".into()))?;

    // Brute force over the raw entropies.
    let mut deltas = Vec::new();
    for (id, fm) in &flashmem {
        for trig in &fm.triggers {
            let (mut sv, mut sf) = (0.0, 0.0);
            for j in trig.step..trig.step + 10 {
                sv += vanilla[id].steps[j].entropy;
                sf += fm.steps[j].entropy;
            }
            deltas.push(sv / 10.0 - sf / 10.0);
        }
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let p_red = deltas.iter().filter(|&&d| d > 0.0).count() as f64 / n;
    let p_sig = deltas.iter().filter(|&&d| d > 0.5).count() as f64 / n;

    ensure!(stats.n_triggers == 3, "{} triggers scored", stats.n_triggers);
    ensure!((stats.mean_delta - 0.2333333333).abs() < 1e-6, "mean Δ = {}", stats.mean_delta);
    ensure!((stats.mean_delta - mean).abs() < 1e-12, "mean Δ {} vs oracle {mean}", stats.mean_delta);
    ensure!(stats.prob_reduction == 2.0 / 3.0 && stats.prob_reduction == p_red, "P(Δ>0) = {}", stats.prob_reduction);
    ensure!(stats.prob_significant == 1.0 / 3.0 && stats.prob_significant == p_sig, "P(Δ>0.5) = {}", stats.prob_significant);
    Ok(format!(
        "mean Δ = {:.7}, P(Δ>0) = {:.4}, P(Δ>0.5) = {:.4}, equal to brute force",
        stats.mean_delta, stats.prob_reduction, stats.prob_significant
    ))
}

// 9 ------------------------------------------------------------------------

fn depth_sweep_trend() -> Outcome {
    let cfg = SweepConfig::default();
    let rows = depth_sweep::<f32>(&cfg, |_| {})?;
    let layers: Vec<usize> = rows.iter().map(|r| r.layers).collect();
    ensure!(layers == (1..=6).collect::<Vec<_>>(), "swept {layers:?}");
    let diffs: Vec<i64> = rows.windows(2).map(|w| w[1].param_count as i64 - w[0].param_count as i64).collect();
    ensure!(diffs.iter().all(|&d| d == diffs[0] && d > 0), "param differences {diffs:?}");
    let latency: Vec<f64> = rows.iter().map(|r| r.consolidation_ms).collect();
    let shown: Vec<String> = latency.iter().map(|v| format!("{v:.3}")).collect();
    ensure!(latency.windows(2).all(|w| w[1] >= w[0]), "latency {shown:?} ms decreases");

    let dir = tempfile::tempdir().map_err(|e| Fail(e.to_string()))?;
    let csv = dir.path().join("depth_sweep.csv");
    write_sweep_csv(&csv, &rows)?;
    let back = read_sweep_csv(&csv)?;
    ensure!(back.len() == 6, "CSV holds {} rows", back.len());
    let (lat_plot, param_plot) = depth_plots(&back);
    for (name, plot) in [("latency.svg", lat_plot), ("params.svg", param_plot)] {
        let p = dir.path().join(name);
        plot.write(&p)?;
        let text = std::fs::read_to_string(&p).map_err(|e| Fail(e.to_string()))?;
        ensure!(text.starts_with("<svg") && text.contains("polyline"), "{name} is not a line plot");
    }
    let acc: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.heldout_accuracy)).collect();
    Ok(format!(
        "params +{} per layer, latency {} ms, accuracy {} (reported only), CSV and 2 SVGs written",
        diffs[0],
        shown.join(" <= "),
        acc.join("/")
    ))
}

// 10 -----------------------------------------------------------------------

fn determinism_and_persistence() -> Outcome {
    let models = || -> flashmem::Result<(Backbone<f32>, Consolidator<f32>)> {
        let bb = Backbone::<f32>::init(BackboneConfig::sized(3, 32, 4), 77)?;
        let c = Consolidator::inherit(&bb, ConsolidatorConfig { n_layers: 2, n_memory_tokens: 4, d_model: 32 }, 78)?;
        Ok((bb, c))
    };
    let prompt: Vec<u32> = std::iter::once(1).chain("a=Q;b=R;c=S;?b".bytes().map(u32::from)).collect();
    let gen = GenerationConfig {
        max_new_tokens: 40,
        trigger_cooldown: 6,
        min_trigger_step: 2,
        sampling: Sampling::Temperature { temperature: 0.8, seed: 5 },
        record_attention: true,
        ..Default::default()
    };
    let run = |bb: &Backbone<f32>, c: &Consolidator<f32>| -> flashmem::Result<RunTrace<f32>> {
        let probe = Engine::new(bb, None, Monitor::default())?.run(&prompt, &GenerationConfig { mode: Mode::Vanilla, ..gen.clone() })?;
        let tau = calibrate_threshold(&probe.log().entropies(), 70.0)?;
        Engine::new(bb, Some(c), Monitor::new(MonitorConfig::default().with_threshold(tau))?)?.run(&prompt, &gen)
    };
    let (bb1, c1) = models()?;
    let (bb2, c2) = models()?;
    let (t1, t2) = (run(&bb1, &c1)?, run(&bb2, &c2)?);
    ensure!(!t1.triggers.is_empty(), "fixture never consolidated");
    ensure!(t1.same_behavior(&t2), "traces differ between identical seeds");
    let strip = |t: &RunTrace<f32>| t.log().records().iter().map(|r| serde_json::to_string(r).unwrap().split("\"wall_ms\"").next().unwrap().split("\"consolidation_ms\"").next().unwrap().to_string()).collect::<Vec<_>>();
    ensure!(strip(&t1) == strip(&t2), "serialized traces differ");

    let bench = BenchConfig { contexts: vec![32, 64], n_runs: 2, cycles: 2, tokens_per_cycle: 4, ..Default::default() };
    let (b1, b2) = (bench_cyclic(&bb1, &c1, &bench)?, bench_cyclic(&bb2, &c2, &bench)?);
    ensure!(b1.without_timing() == b2.without_timing(), "bench reports differ");

    let spec = SyntheticTaskSpec { n_pairs: 3, distractor_len: 4, seed: 4, ..Default::default() };
    let split = make_synthetic_dataset(&spec, 256, 24, 8)?;
    let train_cfg = TrainConfig { batch_size: 8, epochs: 2, k_memory_tokens: 4, consolidator_layers: 2, seed: 3, ..TrainConfig::desk() };
    let train_once = || -> flashmem::Result<(Consolidator<f32>, Vec<f64>, f64)> {
        let (train, held) = (prepare_all(&bb1, &split.train)?, prepare_all(&bb1, &split.heldout)?);
        let (c, report) = train_and_evaluate(&bb1, &train, &held, &train_cfg)?;
        Ok((c, report.steps.iter().map(|s| s.loss).collect(), report.heldout_with_memory.mean_ce))
    };
    let (trained, loss_a, ce_a) = train_once()?;
    let (_, loss_b, ce_b) = train_once()?;
    ensure!(loss_a == loss_b && ce_a == ce_b, "training reports differ");

    let dir = tempfile::tempdir().map_err(|e| Fail(e.to_string()))?;
    let path = dir.path().join("model.fmem");
    save_checkpoint(&path, &bb1, Some(&trained))?;
    let loaded = load_checkpoint::<f32>(&path)?;
    let restored = loaded.consolidator.as_ref().ok_or_else(|| Fail("checkpoint lost the consolidator".into()))?;
    let (orig, replay) = (run(&bb1, &trained)?, run(&loaded.backbone, restored)?);
    ensure!(orig.same_behavior(&replay), "replay from checkpoint differs");
    Ok(format!(
        "traces ({} triggers), bench and training reports bitwise equal across runs; checkpoint replay identical ({} triggers)",
        t1.triggers.len(),
        replay.triggers.len()
    ))
}

// --------------------------------------------------------------------------

static PANIC_AT: std::sync::Mutex<String> = std::sync::Mutex::new(String::new());

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "autodiff end-to-end", autodiff_end_to_end),
    (2, "cache fidelity", cache_fidelity),
    (3, "shared-KV fidelity", shared_kv_fidelity),
    (4, "monitor exactness", monitor_exactness),
    (5, "generation loop conformance", algorithm_conformance),
    (6, "efficiency trend", efficiency_trend),
    (7, "learning effect", learning_effect),
    (8, "statistics pipeline", statistics_pipeline),
    (9, "depth sweep", depth_sweep_trend),
    (10, "determinism and persistence", determinism_and_persistence),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|info| {
        *PANIC_AT.lock().unwrap() = info.location().map(|l| l.to_string()).unwrap_or_default();
    }));
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(Fail(format!("panicked at {}: {}", PANIC_AT.lock().unwrap(), msg.unwrap_or_default())))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} [{name}]: PASS ({secs:.1} s) {detail}"),
            Err(Fail(detail)) => {
                failed += 1;
                println!("criterion {id:>2} [{name}]: FAIL ({secs:.1} s) {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
