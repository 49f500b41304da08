//! Save a backbone and consolidator, load them back, and replay a trace.

use flashmem::backbone::{Backbone, BackboneConfig};
use flashmem::checkpoint::{load_checkpoint, save_checkpoint};
use flashmem::consolidator::{Consolidator, ConsolidatorConfig};
use flashmem::engine::{Engine, GenerationConfig};
use flashmem::monitor::{Monitor, MonitorConfig};

pub fn run_example() -> flashmem::Result<bool> {
    let bb = Backbone::<f32>::init(BackboneConfig::sized(2, 16, 2), 5)?;
    let c = Consolidator::inherit(&bb, ConsolidatorConfig { n_layers: 1, n_memory_tokens: 2, d_model: 16 }, 6)?;
    let path = std::env::temp_dir().join(format!("flashmem-example-{}.fmem", std::process::id()));
    save_checkpoint(&path, &bb, Some(&c))?;
    let loaded = load_checkpoint::<f32>(&path)?;
    std::fs::remove_file(&path)?;
    let monitor = || Monitor::new(MonitorConfig::default().with_threshold(0.5));
    let cfg = GenerationConfig { max_new_tokens: 20, trigger_cooldown: 4, ..Default::default() };
    let prompt = [1, 40, 41, 42, 43];
    let a = Engine::new(&bb, Some(&c), monitor()?)?.run(&prompt, &cfg)?;
    let b = Engine::new(&loaded.backbone, loaded.consolidator.as_ref(), monitor()?)?.run(&prompt, &cfg)?;
    Ok(a.same_behavior(&b))
}

#[allow(dead_code)]
fn main() {
    println!("replayed trace identical: {}", run_example().expect("checkpoint"));
}
