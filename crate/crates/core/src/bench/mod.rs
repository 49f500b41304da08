//! Cyclic efficiency benchmark, entropy-reduction statistics, depth sweep
//! and their CSV/SVG artifacts.

mod cyclic;
mod stats;
mod svg;
mod sweep;

pub use cyclic::{
    bench_cyclic, expected_peak_bytes, read_bench_csv, read_runs_csv, synthetic_prompt, write_bench_csv, write_runs_csv,
    BenchConfig, BenchReport, BenchRow, BenchRun,
};
pub use stats::{entropy_stats, EntropyStats, StatsConfig, TriggerDelta};
pub use svg::{depth_plots, entropy_plot, LinePlot, Series};
pub use sweep::{
    consolidation_latency, depth_sweep, param_counts, read_sweep_csv, write_sweep_csv, SweepConfig, SweepRow,
};
