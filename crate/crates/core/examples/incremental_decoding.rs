//! Token-by-token decoding through the KV cache against the uncached
//! reference forward (equal up to f32 rounding), and against a one-shot
//! prefill (bitwise equal).

use flashmem::backbone::{Backbone, BackboneConfig, StepInput};

pub fn run_example() -> flashmem::Result<(f64, bool)> {
    let bb = Backbone::<f32>::init(BackboneConfig::sized(2, 32, 4), 7)?;
    let tokens: Vec<u32> = "BOS the quick brown fox".bytes().map(u32::from).collect();
    let full = bb.forward_full(&tokens)?;
    let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
    let (mut cache, first) = bb.prefill(&tokens[..1])?;
    let mut worst = diff(first.logits.data(), full.row(0));
    let mut last = first.logits;
    for (i, &t) in tokens.iter().enumerate().skip(1) {
        let out = bb.decode_step(StepInput::Token(t), &mut cache)?;
        worst = worst.max(diff(out.logits.data(), full.row(i)));
        last = out.logits;
    }
    assert_eq!(cache.len(), tokens.len());
    let (_, prefill) = bb.prefill(&tokens)?;
    Ok((worst, prefill.logits == last))
}

#[allow(dead_code)]
fn main() {
    let (worst, bitwise) = run_example().expect("decode");
    println!("max |incremental - reference| over all logits: {worst:.3e}");
    println!("prefill and decode agree bitwise: {bitwise}");
}
