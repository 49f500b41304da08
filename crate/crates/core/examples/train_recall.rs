//! Trains a consolidator on key-value recall through the frozen backbone.

use flashmem::backbone::{Backbone, BackboneConfig};
use flashmem::trainer::{make_synthetic_dataset, prepare_all, train_and_evaluate, SyntheticTaskSpec, TrainConfig};

pub fn run_example() -> flashmem::Result<(f64, f64)> {
    let bb = Backbone::<f32>::init(BackboneConfig::sized(3, 32, 4), 0)?;
    let spec = SyntheticTaskSpec { n_pairs: 4, distractor_len: 8, seed: 1, ..Default::default() };
    let split = make_synthetic_dataset(&spec, 256, 96, 32)?;
    let train = prepare_all(&bb, &split.train)?;
    let heldout = prepare_all(&bb, &split.heldout)?;
    let cfg = TrainConfig { batch_size: 16, epochs: 3, k_memory_tokens: 4, ..TrainConfig::desk() };
    let (_, report) = train_and_evaluate(&bb, &train, &heldout, &cfg)?;
    Ok((report.heldout_with_memory.mean_ce, report.heldout_without_memory.mean_ce))
}

#[allow(dead_code)]
fn main() {
    let (with, without) = run_example().expect("train");
    println!("held-out cross-entropy: {with:.4} with memory, {without:.4} without");
}
