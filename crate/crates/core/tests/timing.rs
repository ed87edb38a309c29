mod common;

use common::synthetic_dataset;
use dainv::trainer::{measure_overhead, median_step_seconds, TrainConfig};

// One test so nothing else competes for the CPU while steps are timed.
#[test]
fn step_time_scaling() {
    let dataset = synthetic_dataset(512, 16, 21);
    let config = TrainConfig { width: 0.5, batch_size: 32, m_copies: 4, ..TrainConfig::default() };

    let no_taps = TrainConfig { inv_layers: Vec::new(), ..config.clone() };
    let overhead = measure_overhead(&no_taps, &dataset, 20).unwrap();
    assert!((overhead.ratio - 1.0).abs() <= 0.05, "ratio without taps {}", overhead.ratio);

    let baseline = TrainConfig { invariance_mode: false, monitor_invariance: false, ..config };
    let doubled = TrainConfig { batch_size: 64, ..baseline.clone() };
    // Alternate the two sizes and keep the fastest median of each.
    let (mut single, mut double) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..3 {
        single = single.min(median_step_seconds(&baseline, &dataset, 20).unwrap());
        double = double.min(median_step_seconds(&doubled, &dataset, 20).unwrap());
    }
    let factor = double / single;
    assert!((1.6..=2.6).contains(&factor), "doubling the batch scaled step time by {factor}");
}
