//! Entropy reduction after triggers against a vanilla counterfactual, with
//! an entropy-vs-step plot.

use std::collections::BTreeMap;

use flashmem::backbone::{Backbone, BackboneConfig};
use flashmem::bench::{entropy_plot, entropy_stats, StatsConfig};
use flashmem::consolidator::{Consolidator, ConsolidatorConfig};
use flashmem::engine::{Engine, GenerationConfig, Mode};
use flashmem::monitor::{calibrate_threshold, Monitor, MonitorConfig};

pub fn run_example() -> flashmem::Result<usize> {
    let bb = Backbone::<f32>::init(BackboneConfig::sized(3, 32, 4), 2)?;
    let c = Consolidator::inherit(&bb, ConsolidatorConfig { n_layers: 1, n_memory_tokens: 4, d_model: 32 }, 1)?;
    let gen = GenerationConfig { max_new_tokens: 40, trigger_cooldown: 10, ..Default::default() };
    let prompts: Vec<Vec<u32>> = (0..4u32).map(|s| (0..24).map(|i| 2 + (i * 17 + s * 29) % 250).collect()).collect();
    let probe = Engine::new(&bb, None, Monitor::default())?;
    let mut vanilla = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        vanilla.insert(format!("p{i}"), probe.run(p, &GenerationConfig { mode: Mode::Vanilla, ..gen.clone() })?.log());
    }
    let all: Vec<f64> = vanilla.values().flat_map(|l| l.entropies()).collect();
    let tau = calibrate_threshold(&all, 85.0)?;
    let engine = Engine::new(&bb, Some(&c), Monitor::new(MonitorConfig::default().with_threshold(tau))?)?;
    let mut flashmem = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        flashmem.insert(format!("p{i}"), engine.run(p, &gen)?.log());
    }
    entropy_plot(&vanilla["p0"], &flashmem["p0"], "p0").write(std::env::temp_dir().join("flashmem_entropy_p0.svg"))?;
    let stats = entropy_stats(&vanilla, &flashmem, &StatsConfig::default())?;
    Ok(stats.map_or(0, |s| s.n_triggers))
}

#[allow(dead_code)]
fn main() {
    println!("scored triggers: {}", run_example().expect("stats"));
}
