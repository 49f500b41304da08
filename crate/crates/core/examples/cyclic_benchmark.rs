//! Cyclic generation benchmark on a small grid, written as CSV.

use flashmem::backbone::{Backbone, BackboneConfig};
use flashmem::bench::{bench_cyclic, write_bench_csv, BenchConfig, BenchReport};
use flashmem::consolidator::{Consolidator, ConsolidatorConfig};

pub fn run_example() -> flashmem::Result<BenchReport> {
    let bb = Backbone::<f32>::init(BackboneConfig::default(), 0)?;
    let c = Consolidator::inherit(&bb, ConsolidatorConfig::for_backbone(bb.config()), 0)?;
    let cfg = BenchConfig { contexts: vec![128, 512], n_runs: 3, ..Default::default() };
    let report = bench_cyclic(&bb, &c, &cfg)?;
    write_bench_csv(std::env::temp_dir().join("flashmem_bench_cyclic.csv"), &report)?;
    Ok(report)
}

#[allow(dead_code)]
fn main() {
    let report = run_example().expect("bench");
    println!("context  mode        peak_bytes  consolidation_ms  step_ms  tokens/s");
    for r in &report.rows {
        println!(
            "{:>7}  {:<10}  {:>10}  {:>16.3}  {:>7.3}  {:>8.1}",
            r.context_len, r.mode, r.cache_bytes_peak, r.consolidation_ms_mean, r.step_ms_mean, r.effective_throughput_tokens_per_s
        );
    }
}
