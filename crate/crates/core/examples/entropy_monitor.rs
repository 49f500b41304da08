//! Sink-masked attention entropy and threshold calibration.

use flashmem::monitor::{calibrate_threshold, Monitor, MonitorConfig};
use flashmem::tensor::Tensor;

pub fn run_example() -> flashmem::Result<(Vec<f64>, f64, f64)> {
    let monitor = Monitor::new(MonitorConfig::default())?;
    // Two heads over five positions; position 0 is the sink.
    let attn = Tensor::<f64>::new(
        vec![2, 5],
        vec![
            0.60, 0.10, 0.10, 0.10, 0.10, // uniform once the sink is removed
            0.20, 0.48, 0.32, 0.00, 0.00, // [0.6, 0.4] after renormalizing
        ],
    )?;
    let (h, per_head, degenerate) = monitor.entropy(&attn)?;
    assert!(!degenerate);
    let validation: Vec<f64> = (1..=20).map(f64::from).collect();
    let tau = calibrate_threshold(&validation, 85.0)?;
    Ok((per_head, h, tau))
}

#[allow(dead_code)]
fn main() {
    let (per_head, mean, tau) = run_example().expect("monitor");
    println!("uniform over 4 -> {:.5} nats (ln 4 = {:.5})", per_head[0], 4f64.ln());
    println!("[0.6, 0.4]     -> {:.5} nats", per_head[1]);
    println!("head mean      -> {mean:.5}");
    println!("85th percentile of 1..=20 -> tau = {tau}");
}
