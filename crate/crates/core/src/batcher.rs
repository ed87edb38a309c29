//! In-batch augmentation: each batch holds `M` independently augmented
//! copies of `B / M` seed images, grouped contiguously.
//!
//! Every epoch runs `⌊N / B⌋` steps in both modes. Seeds come from a
//! persistent shuffled ring over all `N` training images, so an epoch in
//! invariance mode touches `N / M` seeds and the remainder lead off the
//! following epochs.

use rand::seq::SliceRandom;

use crate::augment::{apply_augmentation, sample_train_params, AugmentScheme};
use crate::dataset::{find_seed, normalize_in_place, ChannelStats, ImageRecord, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::objective::GroupIndex;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed_ids: Vec<usize>,
    pub m: usize,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.seed_ids.len() * self.m
    }

    pub fn groups(&self) -> GroupIndex {
        GroupIndex::contiguous(self.batch_size(), self.m).expect("plan shape is valid by construction")
    }
}

/// Shuffled cyclic order over seed ids, reshuffled each time it wraps.
#[derive(Debug, Clone)]
struct SeedRing {
    order: Vec<usize>,
    pos: usize,
    rng: Stream,
}

impl SeedRing {
    fn new(n: usize, mut rng: Stream) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        SeedRing { order, pos: 0, rng }
    }

    /// `count ≤ n` distinct seeds.
    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let head = count.min(self.order.len() - self.pos);
        out.extend_from_slice(&self.order[self.pos..self.pos + head]);
        self.pos += head;
        if out.len() < count {
            self.order.shuffle(&mut self.rng);
            // Seeds already taken this plan move to the back of the new pass.
            let (mut fresh, repeat): (Vec<usize>, Vec<usize>) =
                self.order.iter().copied().partition(|s| !out.contains(s));
            fresh.extend(repeat);
            self.order = fresh;
            self.pos = 0;
            let rest = count - out.len();
            out.extend_from_slice(&self.order[..rest]);
            self.pos = rest;
        }
        out
    }
}

/// Produces the batch plans of successive epochs.
#[derive(Debug, Clone)]
pub struct EpochPlanner {
    ring: SeedRing,
    batch_size: usize,
    m: usize,
    steps_per_epoch: usize,
}

impl EpochPlanner {
    pub fn new(rng: Stream, train_size: usize, batch_size: usize, m: usize, invariance_mode: bool) -> Result<Self> {
        if batch_size == 0 || m == 0 {
            return Err(Error::invalid("batch size and copies must be positive"));
        }
        if batch_size > train_size {
            return Err(Error::invalid(format!("batch size {batch_size} exceeds training set size {train_size}")));
        }
        if m > batch_size {
            return Err(Error::invalid(format!("{m} copies exceed batch size {batch_size}")));
        }
        if !invariance_mode && m != 1 {
            return Err(Error::invalid("baseline batches use one copy per seed"));
        }
        if !batch_size.is_multiple_of(m) {
            return Err(Error::invalid(format!("batch size {batch_size} is not a multiple of {m} copies")));
        }
        Ok(EpochPlanner {
            ring: SeedRing::new(train_size, rng),
            batch_size,
            m,
            steps_per_epoch: train_size / batch_size,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn next_epoch(&mut self) -> Vec<BatchPlan> {
        let seeds = self.batch_size / self.m;
        (0..self.steps_per_epoch).map(|_| BatchPlan { seed_ids: self.ring.take(seeds), m: self.m }).collect()
    }
}

/// Plans for a single epoch from a fresh ring.
pub fn build_epoch_plans(
    rng: Stream,
    train_size: usize,
    batch_size: usize,
    m: usize,
    invariance_mode: bool,
) -> Result<Vec<BatchPlan>> {
    Ok(EpochPlanner::new(rng, train_size, batch_size, m, invariance_mode)?.next_epoch())
}

/// Stream for batch `step` of `epoch`; independent of materialization order.
pub fn batch_stream(base_seed: u64, epoch: usize, step: usize) -> Stream {
    stream(base_seed, "batch", epoch as u64, step as u64)
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `B × 3 × 32 × 32`, normalized.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub groups: GroupIndex,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Augments each seed `M` times with independent draws, normalizing after
/// augmentation. Rows are group-contiguous.
pub fn materialize_batch(
    plan: &BatchPlan,
    split: &[ImageRecord],
    scheme: &AugmentScheme,
    stats: &ChannelStats,
    rng: &mut Stream,
) -> Result<Batch> {
    let mut images = Vec::with_capacity(plan.batch_size() * IMAGE_LEN);
    let mut labels = Vec::with_capacity(plan.batch_size());
    for &seed in &plan.seed_ids {
        let record = find_seed(split, seed)?;
        for _ in 0..plan.m {
            let params = sample_train_params(rng, scheme);
            let mut img = apply_augmentation(&record.pixels, &params);
            normalize_in_place(&mut img, stats);
            images.extend_from_slice(&img);
            labels.push(usize::from(record.label));
        }
    }
    Ok(Batch { images, labels, groups: plan.groups() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn records(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| ImageRecord {
                seed_id: i,
                label: (i % 10) as u8,
                pixels: (0..IMAGE_LEN).map(|p| ((p * (i + 3)) % 97) as f32 / 96.0).collect(),
            })
            .collect()
    }

    #[test]
    fn baseline_plans_cover_everything() {
        let plans = build_epoch_plans(stream(1, "ring", 0, 0), 8, 4, 1, false).unwrap();
        assert_eq!(plans.len(), 2);
        let seen: HashSet<usize> = plans.iter().flat_map(|p| p.seed_ids.clone()).collect();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn ring_spreads_seeds_over_m_epochs() {
        let mut planner = EpochPlanner::new(stream(1, "ring", 0, 0), 8, 4, 2, true).unwrap();
        let e0: Vec<usize> = planner.next_epoch().iter().flat_map(|p| p.seed_ids.clone()).collect();
        let e1: Vec<usize> = planner.next_epoch().iter().flat_map(|p| p.seed_ids.clone()).collect();
        assert_eq!(e0.len(), 4);
        assert_eq!(e0.iter().collect::<HashSet<_>>().len(), 4);
        let all: HashSet<usize> = e0.iter().chain(&e1).copied().collect();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn steps_per_epoch() {
        let p = EpochPlanner::new(stream(0, "ring", 0, 0), 50_000, 128, 4, true).unwrap();
        assert_eq!(p.steps_per_epoch(), 390);
    }

    #[test]
    fn plan_errors() {
        assert!(build_epoch_plans(stream(0, "ring", 0, 0), 8, 16, 1, false).is_err());
        assert!(build_epoch_plans(stream(0, "ring", 0, 0), 8, 4, 8, true).is_err());
        assert!(build_epoch_plans(stream(0, "ring", 0, 0), 8, 6, 4, true).is_err());
        assert!(build_epoch_plans(stream(0, "ring", 0, 0), 8, 4, 2, false).is_err());
    }

    #[test]
    fn seeds_distinct_across_wraps() {
        let mut planner = EpochPlanner::new(stream(3, "ring", 0, 0), 10, 8, 2, true).unwrap();
        for _ in 0..20 {
            for plan in planner.next_epoch() {
                assert_eq!(plan.seed_ids.iter().collect::<HashSet<_>>().len(), 4);
            }
        }
    }

    #[test]
    fn identity_scheme_copies_are_identical() {
        let data = records(6);
        let plan = BatchPlan { seed_ids: vec![2, 5], m: 3 };
        let b = materialize_batch(
            &plan,
            &data,
            &AugmentScheme::none(),
            &ChannelStats::identity(),
            &mut batch_stream(0, 0, 0),
        )
        .unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.labels, vec![2, 2, 2, 5, 5, 5]);
        assert_eq!(b.images[..IMAGE_LEN], b.images[IMAGE_LEN..2 * IMAGE_LEN]);
        assert_eq!(b.images[..IMAGE_LEN], data[2].pixels[..]);
        assert_eq!(b.groups.group_of(4), 1);
    }

    #[test]
    fn augmented_copies_differ_and_reproduce() {
        let data = records(4);
        let plan = BatchPlan { seed_ids: vec![1, 3], m: 2 };
        let scheme = AugmentScheme::default();
        let stats = ChannelStats { mean: [0.5; 3], std: [0.25; 3] };
        let a = materialize_batch(&plan, &data, &scheme, &stats, &mut batch_stream(9, 2, 7)).unwrap();
        let b = materialize_batch(&plan, &data, &scheme, &stats, &mut batch_stream(9, 2, 7)).unwrap();
        assert_ne!(a.images[..IMAGE_LEN], a.images[IMAGE_LEN..2 * IMAGE_LEN]);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn unknown_seed_is_an_error() {
        let data = records(3);
        let plan = BatchPlan { seed_ids: vec![7], m: 1 };
        let r = materialize_batch(
            &plan,
            &data,
            &AugmentScheme::none(),
            &ChannelStats::identity(),
            &mut batch_stream(0, 0, 0),
        );
        assert!(matches!(r, Err(Error::UnknownSeed(7))));
    }
}
