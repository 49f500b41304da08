//! Consolidator depth against accuracy, latency and size.

use flashmem::backbone::BackboneConfig;
use flashmem::bench::{depth_plots, depth_sweep, SweepConfig, SweepRow};
use flashmem::trainer::{SyntheticTaskSpec, TrainConfig};

pub fn run_example() -> flashmem::Result<Vec<SweepRow>> {
    let cfg = SweepConfig {
        depths: vec![1, 2, 3],
        backbone: BackboneConfig::sized(4, 16, 2),
        task: SyntheticTaskSpec { n_pairs: 2, distractor_len: 4, ..Default::default() },
        n_train: 32,
        n_heldout: 8,
        train: TrainConfig { batch_size: 8, epochs: 1, ..TrainConfig::desk() },
        latency_context: 128,
        latency_runs: 5,
        seed: 0,
    };
    let rows = depth_sweep::<f32>(&cfg, |_| {})?;
    let (latency, params) = depth_plots(&rows);
    latency.write(std::env::temp_dir().join("flashmem_depth_latency.svg"))?;
    params.write(std::env::temp_dir().join("flashmem_depth_params.svg"))?;
    Ok(rows)
}

#[allow(dead_code)]
fn main() {
    for r in run_example().expect("sweep") {
        println!("L={} accuracy={:.3} latency={:.3} ms params={}", r.layers, r.heldout_accuracy, r.consolidation_ms, r.param_count);
    }
}
