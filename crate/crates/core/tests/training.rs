mod common;

use common::{desk_experiment, synthetic_dataset, tiny_config, DeskScale};
use dainv::augment::AugmentScheme;
use dainv::batcher::Batch;
use dainv::dataset::{normalize, IMAGE_LEN};
use dainv::network::{backward, forward, ModelParams};
use dainv::objective::{cross_entropy, cross_entropy_with_grad, AlphaSchedule, GroupIndex, InvarianceVariant};
use dainv::trainer::{objective_and_grad, train, TrainConfig, Trainer};
use dainv::Error;

fn fixed_cross_entropy(params: &ModelParams<f32>, dataset: &dainv::dataset::Dataset, n: usize) -> f64 {
    let images: Vec<f32> =
        dataset.train[..n].iter().flat_map(|r| normalize(&r.pixels, &dataset.channel_stats)).collect();
    let labels: Vec<usize> = dataset.train[..n].iter().map(|r| usize::from(r.label)).collect();
    let acts = forward(params, &images, n).unwrap();
    cross_entropy(acts.logits(), &labels, acts.classes()).unwrap()
}

#[test]
fn baseline_training_reduces_cross_entropy() {
    let dataset = synthetic_dataset(512, 64, 3);
    let config = TrainConfig {
        invariance_mode: false,
        monitor_invariance: false,
        scheme: AugmentScheme::none(),
        epochs: 2,
        batch_size: 64,
        ..tiny_config()
    };
    let initial = Trainer::new(config.clone(), &dataset).unwrap().params().clone();
    let before = fixed_cross_entropy(&initial, &dataset, 128);
    let (params, logs) = train(&config, &dataset).unwrap();
    let after = fixed_cross_entropy(&params, &dataset, 128);
    assert_eq!(logs.len(), 2);
    assert!(after < before, "cross-entropy {before} -> {after}");
    assert!(logs.iter().all(|l| l.degenerate_skips == 0 && l.inv_losses.iter().all(Option::is_none)));
}

#[test]
fn monitoring_does_not_change_parameters() {
    let dataset = synthetic_dataset(128, 16, 5);
    let base = TrainConfig { invariance_mode: false, epochs: 1, ..tiny_config() };
    let (with, with_logs) = train(&TrainConfig { monitor_invariance: true, ..base.clone() }, &dataset).unwrap();
    let (without, without_logs) = train(&TrainConfig { monitor_invariance: false, ..base }, &dataset).unwrap();
    assert_eq!(with, without);
    assert!(with_logs[0].inv_losses.iter().all(Option::is_some));
    assert!(without_logs[0].inv_losses.iter().all(Option::is_none));
    assert_eq!(with_logs[0].cross_entropy, without_logs[0].cross_entropy);
}

#[test]
fn baseline_objective_is_plain_cross_entropy() {
    let dataset = synthetic_dataset(16, 4, 9);
    let config = TrainConfig { invariance_mode: false, batch_size: 16, ..tiny_config() };
    let trainer = Trainer::new(config.clone(), &dataset).unwrap();
    let params = trainer.params();
    let images: Vec<f32> = dataset.train.iter().flat_map(|r| normalize(&r.pixels, &dataset.channel_stats)).collect();
    let labels: Vec<usize> = dataset.train.iter().map(|r| usize::from(r.label)).collect();
    let groups = GroupIndex::contiguous(16, 1).unwrap();
    let layers: Vec<usize> = (1..=9).collect();
    let eval = objective_and_grad(
        params,
        &images,
        &labels,
        &groups,
        &layers,
        &AlphaSchedule::disabled(9),
        InvarianceVariant::Verbatim,
    )
    .unwrap();

    let acts = forward(params, &images, 16).unwrap();
    let (ce, d_logits) = cross_entropy_with_grad(acts.logits(), &labels, acts.classes()).unwrap();
    let grads = backward(params, &acts, &d_logits, &[]).unwrap();
    assert_eq!(eval.cross_entropy, ce);
    assert_eq!(eval.total, ce);
    assert_eq!(eval.grads, grads);
    assert!(eval.inv_losses.iter().all(Option::is_none));
}

#[test]
fn identical_batch_counts_degenerate_layers() {
    let dataset = synthetic_dataset(16, 4, 11);
    let config = TrainConfig { scheme: AugmentScheme::none(), batch_size: 8, m_copies: 4, ..tiny_config() };
    let mut trainer = Trainer::new(config, &dataset).unwrap();
    let image = normalize(&dataset.train[0].pixels, &dataset.channel_stats);
    let batch = Batch {
        images: image.iter().copied().cycle().take(8 * IMAGE_LEN).collect(),
        labels: vec![usize::from(dataset.train[0].label); 8],
        groups: GroupIndex::contiguous(8, 4).unwrap(),
    };
    let before = trainer.params().clone();
    let stats = trainer.step(&batch, 0.01, 1, 0).unwrap();
    assert_eq!(stats.degenerate, 9);
    assert!(stats.inv_losses.iter().all(Option::is_none));
    assert!(stats.cross_entropy.is_finite());
    assert_ne!(trainer.params(), &before);
}

#[test]
fn divergence_is_reported() {
    let dataset = synthetic_dataset(64, 8, 13);
    let config = TrainConfig { learning_rate: 1e12, momentum: 0.0, epochs: 3, ..tiny_config() };
    match train(&config, &dataset) {
        Err(Error::NonFiniteLoss { .. }) => {}
        other => panic!("expected a non-finite loss, got {:?}", other.map(|(_, logs)| logs)),
    }
}

#[test]
fn desk_experiment_runs_at_toy_scale() {
    let scale = DeskScale {
        train_images: 128,
        test_images: 24,
        width: 0.25,
        epochs: 2,
        batch_size: 32,
        transforms: 2,
        references: 10,
    };
    let (baseline, invariance) = desk_experiment(synthetic_dataset(128, 24, 17), &scale);
    for run in [&baseline, &invariance] {
        assert_eq!(run.logs.len(), 2);
        assert_eq!(run.report.layers.len(), 10);
        for layer in 0..=9 {
            let m = run.median(layer);
            assert!(m.is_finite() && m <= 1.0);
        }
        assert!(run.mean_inv(9, 1..=2).is_finite());
        assert!((0.0..=1.0).contains(&run.accuracy));
    }
    assert_eq!(baseline.median(0), invariance.median(0));
}
