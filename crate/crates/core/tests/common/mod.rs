#![allow(dead_code)]

use dainv::dataset::{synthetic_records, Dataset};
use dainv::evaluator::{evaluate_accuracy, evaluate_invariance, EvalSettings, InvarianceReport};
use dainv::network::ModelParams;
use dainv::trainer::{train, EpochLog, TrainConfig};

pub fn synthetic_dataset(train: usize, test: usize, seed: u64) -> Dataset {
    Dataset::new(synthetic_records(train, seed, 0), synthetic_records(test, seed + 1, 0)).unwrap()
}

/// Small, fast configuration on a quarter-width network.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 32,
        m_copies: 4,
        width: 0.25,
        monitor_every: 2,
        base_seed: 7,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct DeskScale {
    pub train_images: usize,
    pub test_images: usize,
    pub width: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub transforms: usize,
    pub references: usize,
}

impl DeskScale {
    pub fn standard() -> Self {
        DeskScale {
            train_images: 5_000,
            test_images: 1_000,
            width: 0.5,
            epochs: 40,
            batch_size: 128,
            transforms: 3,
            references: 100,
        }
    }
}

pub struct DeskRun {
    pub params: ModelParams<f32>,
    pub logs: Vec<EpochLog>,
    pub report: InvarianceReport,
    pub accuracy: f64,
}

impl DeskRun {
    pub fn median(&self, layer: usize) -> f64 {
        self.report.layers.iter().find(|l| l.layer == layer).expect("layer evaluated").summary.median
    }

    /// Mean over `epochs` (1-based, inclusive) of the logged invariance loss at `layer`.
    pub fn mean_inv(&self, layer: usize, epochs: std::ops::RangeInclusive<usize>) -> f64 {
        let k = layer - 1;
        let vals: Vec<f64> =
            self.logs.iter().filter(|l| epochs.contains(&l.epoch)).filter_map(|l| l.inv_losses[k]).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Baseline and invariance runs with identical seeds, then evaluation.
pub fn desk_experiment(dataset: Dataset, scale: &DeskScale) -> (DeskRun, DeskRun) {
    let dataset = dataset.subset(scale.train_images, scale.test_images).unwrap();
    let base_cfg = TrainConfig {
        epochs: scale.epochs,
        batch_size: scale.batch_size,
        m_copies: 4,
        alpha: 0.1,
        width: scale.width,
        base_seed: 0,
        ..TrainConfig::default()
    };
    let settings = EvalSettings {
        transforms: scale.transforms,
        references: scale.references,
        scheme: base_cfg.scheme,
        seed: 0,
        ..EvalSettings::default()
    };
    let run = |invariance_mode: bool| {
        let cfg = TrainConfig { invariance_mode, ..base_cfg.clone() };
        let (params, logs) = train(&cfg, &dataset).unwrap();
        let report = evaluate_invariance(&params, &dataset.test, &dataset.channel_stats, &settings, "desk").unwrap();
        let accuracy = evaluate_accuracy(&params, &dataset.test, &dataset.channel_stats).unwrap();
        DeskRun { params, logs, report, accuracy }
    };
    (run(false), run(true))
}
