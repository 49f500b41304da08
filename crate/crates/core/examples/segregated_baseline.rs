//! Same outputs, different cost: the segregated baseline re-encodes the
//! whole history before every consolidation.

use std::collections::BTreeSet;

use flashmem::backbone::{Backbone, BackboneConfig};
use flashmem::consolidator::{Consolidator, ConsolidatorConfig};
use flashmem::engine::{Engine, GenerationConfig, Mode};
use flashmem::monitor::Monitor;

pub fn run_example() -> flashmem::Result<(f64, f64, usize, usize)> {
    let bb = Backbone::<f32>::init(BackboneConfig::default(), 3)?;
    let c = Consolidator::inherit(&bb, ConsolidatorConfig::for_backbone(bb.config()), 4)?;
    let engine = Engine::new(&bb, Some(&c), Monitor::default())?;
    let prompt: Vec<u32> = (0..512).map(|i| 2 + (i * 7) % 250).collect();
    let session = engine.start(&prompt)?;
    let cfg = |mode| GenerationConfig {
        max_new_tokens: 32,
        mode,
        forced_triggers: BTreeSet::from([0, 16]),
        ..Default::default()
    };
    let shared = engine.run_session(session.clone(), &cfg(Mode::FlashMem))?;
    let seg = engine.run_session(session, &cfg(Mode::Segregated))?;
    assert_eq!(shared.generated_tokens, seg.generated_tokens);
    let mean = |t: &flashmem::engine::RunTrace<f32>| t.triggers.iter().map(|e| e.consolidation_ms).sum::<f64>() / t.triggers.len() as f64;
    Ok((mean(&shared), mean(&seg), shared.cache_bytes_peak, seg.cache_bytes_peak))
}

#[allow(dead_code)]
fn main() {
    let (fm_ms, seg_ms, fm_bytes, seg_bytes) = run_example().expect("baseline");
    println!("consolidation: shared-KV {fm_ms:.2} ms, segregated {seg_ms:.2} ms");
    println!("peak cache bytes: shared-KV {fm_bytes}, segregated {seg_bytes}");
}
