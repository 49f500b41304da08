//! The consolidator reads the backbone's cache directly: no history
//! re-encode, just cross-attention into the stored keys and values.

use flashmem::backbone::{Backbone, BackboneConfig};
use flashmem::consolidator::{Consolidator, ConsolidatorConfig};

pub fn run_example() -> flashmem::Result<(usize, u64)> {
    let bb = Backbone::<f32>::init(BackboneConfig::sized(4, 32, 4), 1)?;
    let cfg = ConsolidatorConfig { n_layers: 1, n_memory_tokens: 8, d_model: 32 };
    let c = Consolidator::inherit(&bb, cfg, 2)?;
    let prompt: Vec<u32> = (0..200).map(|i| 2 + (i * 13) % 250).collect();
    let (cache, out) = bb.prefill(&prompt)?;
    let calls = bb.forward_calls();
    let memory = c.generate(out.last_hidden.data(), &cache, 0, 0.0)?;
    assert_eq!(memory.embeddings.shape(), &[8, 32]);
    Ok((memory.len(), bb.forward_calls() - calls))
}

#[allow(dead_code)]
fn main() {
    let (k, calls) = run_example().expect("consolidate");
    println!("{k} latents generated with {calls} backbone forward passes over the history");
}
