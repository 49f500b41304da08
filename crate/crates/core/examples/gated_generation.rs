//! Entropy-gated generation: vanilla against flashmem on one prompt, with
//! the threshold calibrated from the vanilla run.

use flashmem::backbone::{Backbone, BackboneConfig};
use flashmem::consolidator::{Consolidator, ConsolidatorConfig};
use flashmem::engine::{Engine, GenerationConfig, Mode};
use flashmem::monitor::{calibrate_threshold, Monitor, MonitorConfig};

pub fn run_example() -> flashmem::Result<(usize, usize)> {
    let bb = Backbone::<f32>::init(BackboneConfig::sized(3, 32, 4), 11)?;
    let c = Consolidator::inherit(&bb, ConsolidatorConfig { n_layers: 1, n_memory_tokens: 4, d_model: 32 }, 0)?;
    let prompt: Vec<u32> = std::iter::once(1).chain("k=V;q=R;?k".bytes().map(u32::from)).collect();
    let gen = GenerationConfig { max_new_tokens: 48, trigger_cooldown: 8, ..Default::default() };

    let probe = Engine::new(&bb, None, Monitor::default())?;
    let vanilla = probe.run(&prompt, &GenerationConfig { mode: Mode::Vanilla, ..gen.clone() })?;
    let tau = calibrate_threshold(&vanilla.log().entropies(), 85.0)?;

    let engine = Engine::new(&bb, Some(&c), Monitor::new(MonitorConfig::default().with_threshold(tau))?)?;
    let gated = engine.run(&prompt, &gen)?;
    assert_eq!(gated.final_cache_len, prompt.len() + 48 + 4 * gated.triggers.len());
    Ok((gated.triggers.len(), gated.final_cache_len))
}

#[allow(dead_code)]
fn main() {
    let (n, len) = run_example().expect("generate");
    println!("{n} consolidations; final cache holds {len} positions");
}
