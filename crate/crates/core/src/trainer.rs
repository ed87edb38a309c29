//! SGD training for the baseline and data-augmentation-invariance modes.
//!
//! In invariance mode each step minimizes
//! `(1 − α)·CE + Σ_l α_l · L_inv(l)` over the configured tap layers. In
//! baseline mode the step is plain cross-entropy; the invariance loss is
//! still tracked for logging on separate probe batches built with
//! `m_copies` augmentations per seed, drawn from their own random streams
//! so the parameter trajectory is unaffected.

use std::time::Instant;

use rand::seq::index::sample;

use crate::augment::AugmentScheme;
use crate::batcher::{batch_stream, materialize_batch, Batch, BatchPlan, EpochPlanner};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{backward, forward, init_params, Architecture, ConvParams, ModelParams};
use crate::objective::{
    alpha_schedule, cross_entropy_with_grad, invariance_loss, invariance_loss_with_grad, total_loss, AlphaSchedule,
    GroupIndex, InvarianceVariant,
};
use crate::rng::stream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub m_copies: usize,
    pub alpha: f64,
    /// Tap layers carrying an invariance term (1-based conv indices).
    pub inv_layers: Vec<usize>,
    pub variant: InvarianceVariant,
    pub invariance_mode: bool,
    /// Baseline mode only: track the invariance loss on probe batches.
    pub monitor_invariance: bool,
    pub monitor_every: usize,
    pub base_seed: u64,
    pub scheme: AugmentScheme,
    /// Channel-width multiplier of All-CNN-C (1.0 is the full model).
    pub width: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 350,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_milestones: vec![200, 250, 300],
            lr_decay: 0.1,
            batch_size: 128,
            m_copies: 4,
            alpha: 0.1,
            inv_layers: (1..=9).collect(),
            variant: InvarianceVariant::Verbatim,
            invariance_mode: true,
            monitor_invariance: true,
            monitor_every: 4,
            base_seed: 0,
            scheme: AugmentScheme::default(),
            width: 1.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must lie in (0, 1]"));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::invalid("width multiplier must be positive"));
        }
        if self.monitor_every == 0 {
            return Err(Error::invalid("monitor_every must be at least 1"));
        }
        if self.m_copies == 0 || !self.batch_size.is_multiple_of(self.m_copies) {
            return Err(Error::invalid("batch_size must be a multiple of m_copies"));
        }
        let depth = self.architecture().depth();
        let mut seen = self.inv_layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.inv_layers.len() || self.inv_layers.iter().any(|&l| l == 0 || l > depth) {
            return Err(Error::invalid(format!("inv_layers must be distinct layers in 1..={depth}")));
        }
        if self.invariance_mode && !self.inv_layers.is_empty() {
            alpha_schedule(self.inv_layers.len(), self.alpha)?;
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        self.scheme.validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::all_cnn_c_width(self.width)
    }

    /// Learning rate for 1-based `epoch`: decayed once for every milestone
    /// already completed.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }

    /// Coefficients applied to `inv_layers`; disabled in baseline mode.
    pub fn schedule(&self) -> Result<AlphaSchedule> {
        if !self.invariance_mode || self.inv_layers.is_empty() {
            return Ok(AlphaSchedule::disabled(self.inv_layers.len()));
        }
        alpha_schedule(self.inv_layers.len(), self.alpha)
    }

    fn batch_copies(&self) -> usize {
        if self.invariance_mode {
            self.m_copies
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub cross_entropy: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
    /// Mean invariance loss per entry of `inv_layers`; `None` when no step
    /// produced a value.
    pub inv_losses: Vec<Option<f64>>,
    pub degenerate_skips: usize,
    pub seconds: f64,
}

/// Loss terms and parameter gradients of the combined objective for one batch.
#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub cross_entropy: f64,
    /// One entry per tap layer; `None` when the batch was degenerate there.
    pub inv_losses: Vec<Option<f64>>,
    pub total: f64,
    pub correct: usize,
    pub grads: Vec<ConvParams<T>>,
}

/// Evaluates `(1 − α)·CE + Σ α_l L_inv(l)` and its gradient. With a disabled
/// schedule the invariance terms are neither computed nor differentiated.
#[allow(clippy::too_many_arguments)]
pub fn objective_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    images: &[T],
    labels: &[usize],
    groups: &GroupIndex,
    layers: &[usize],
    schedule: &AlphaSchedule,
    variant: InvarianceVariant,
) -> Result<LossEval<T>> {
    let batch = labels.len();
    let acts = forward(params, images, batch)?;
    let classes = acts.classes();
    let (ce, mut d_logits) = cross_entropy_with_grad(acts.logits(), labels, classes)?;
    let correct = count_correct(acts.logits(), labels, classes);

    let mut inv_losses = vec![None; layers.len()];
    let mut tap_grads: Vec<(usize, Vec<T>)> = Vec::new();
    if schedule.alpha > 0.0 {
        let keep = T::from_f64(1.0 - schedule.alpha);
        d_logits.iter_mut().for_each(|g| *g *= keep);
        for (k, &layer) in layers.iter().enumerate() {
            match invariance_loss_with_grad(acts.tap(layer), batch, acts.dim(layer), groups, variant) {
                Ok((loss, mut g)) => {
                    let coeff = T::from_f64(schedule.coefficients[k]);
                    g.iter_mut().for_each(|v| *v *= coeff);
                    inv_losses[k] = Some(loss);
                    tap_grads.push((layer, g));
                }
                Err(Error::DegenerateBatch) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let terms: Vec<f64> = inv_losses.iter().map(|l| l.unwrap_or(0.0)).collect();
    let total = total_loss(ce, &terms, schedule)?;
    let tap_refs: Vec<(usize, &[T])> = tap_grads.iter().map(|(l, g)| (*l, g.as_slice())).collect();
    let grads = backward(params, &acts, &d_logits, &tap_refs)?;
    Ok(LossEval { cross_entropy: ce, inv_losses, total, correct, grads })
}

/// Value of the combined objective only (no gradients).
#[allow(clippy::too_many_arguments)]
pub fn objective_value<T: Scalar>(
    params: &ModelParams<T>,
    images: &[T],
    labels: &[usize],
    groups: &GroupIndex,
    layers: &[usize],
    schedule: &AlphaSchedule,
    variant: InvarianceVariant,
) -> Result<f64> {
    let batch = labels.len();
    let acts = forward(params, images, batch)?;
    let (ce, _) = cross_entropy_with_grad(acts.logits(), labels, acts.classes())?;
    let mut terms = vec![0.0; layers.len()];
    if schedule.alpha > 0.0 {
        for (k, &layer) in layers.iter().enumerate() {
            match invariance_loss(acts.tap(layer), batch, acts.dim(layer), groups, variant) {
                Ok(l) => terms[k] = l,
                Err(Error::DegenerateBatch) => {}
                Err(e) => return Err(e),
            }
        }
    }
    total_loss(ce, &terms, schedule)
}

fn count_correct<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> usize {
    labels.iter().enumerate().filter(|(i, &label)| argmax(&logits[i * classes..(i + 1) * classes]) == label).count()
}

/// Index of the first maximum.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub cross_entropy: f64,
    pub total: f64,
    pub inv_losses: Vec<Option<f64>>,
    pub correct: usize,
    pub batch: usize,
    pub degenerate: usize,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    params: ModelParams<f32>,
    velocity: Vec<ConvParams<f32>>,
    planner: EpochPlanner,
    schedule: AlphaSchedule,
    epochs_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture();
        let params = init_params(&arch, &mut stream(config.base_seed, "init", 0, 0));
        Self::with_params(config, dataset, params)
    }

    pub fn with_params(config: TrainConfig, dataset: &'a Dataset, params: ModelParams<f32>) -> Result<Self> {
        config.validate()?;
        if params.arch != config.architecture() {
            return Err(Error::ShapeMismatch("initial parameters do not match the configured architecture".into()));
        }
        let planner = EpochPlanner::new(
            stream(config.base_seed, "ring", 0, 0),
            dataset.train.len(),
            config.batch_size,
            config.batch_copies(),
            config.invariance_mode,
        )?;
        let schedule = config.schedule()?;
        let velocity = ModelParams::<f32>::zeros(&params.arch).layers;
        Ok(Trainer { config, dataset, params, velocity, planner, schedule, epochs_done: 0 })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.planner.steps_per_epoch()
    }

    pub fn plan_epoch(&mut self) -> Vec<BatchPlan> {
        self.planner.next_epoch()
    }

    pub fn materialize(&self, plan: &BatchPlan, epoch: usize, step: usize) -> Result<Batch> {
        let mut rng = batch_stream(self.config.base_seed, epoch, step);
        materialize_batch(plan, &self.dataset.train, &self.config.scheme, &self.dataset.channel_stats, &mut rng)
    }

    /// One optimizer step on a materialized batch.
    pub fn step(&mut self, batch: &Batch, lr: f64, epoch: usize, step: usize) -> Result<StepStats> {
        let eval = objective_and_grad(
            &self.params,
            &batch.images,
            &batch.labels,
            &batch.groups,
            &self.config.inv_layers,
            &self.schedule,
            self.config.variant,
        )
        .map_err(|e| with_step_context(e, epoch, step))?;
        if !eval.cross_entropy.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step, term: "cross_entropy".into() });
        }
        for (loss, &layer) in eval.inv_losses.iter().zip(&self.config.inv_layers) {
            if loss.is_some_and(|l| !l.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step, term: format!("invariance conv{layer}") });
            }
        }
        let degenerate =
            if self.schedule.alpha > 0.0 { eval.inv_losses.iter().filter(|l| l.is_none()).count() } else { 0 };
        let mut grads = eval.grads;
        if let Some(limit) = self.config.clip_norm {
            clip_gradients(&mut grads, limit);
        }
        self.apply_update(&grads, lr);
        Ok(StepStats {
            cross_entropy: eval.cross_entropy,
            total: eval.total,
            inv_losses: eval.inv_losses,
            correct: eval.correct,
            batch: batch.len(),
            degenerate,
        })
    }

    fn apply_update(&mut self, grads: &[ConvParams<f32>], lr: f64) {
        let mu = self.config.momentum as f32;
        let lr = lr as f32;
        for ((p, v), g) in self.params.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, vel), &gw) in p.weight.iter_mut().zip(&mut v.weight).zip(&g.weight) {
                *vel = mu * *vel + gw;
                *w -= lr * *vel;
            }
            for ((b, vel), &gb) in p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *vel = mu * *vel + gb;
                *b -= lr * *vel;
            }
        }
    }

    /// Invariance losses of the current parameters on a probe batch of
    /// `m_copies` augmentations per seed. Forward only.
    pub fn probe_invariance(&self, epoch: usize, step: usize) -> Result<Vec<Option<f64>>> {
        let m = self.config.m_copies;
        let seeds_per_batch = self.config.batch_size / m;
        let n = self.dataset.train.len();
        let mut rng = stream(self.config.base_seed, "probe", epoch as u64, step as u64);
        let seed_ids = sample(&mut rng, n, seeds_per_batch.min(n)).into_vec();
        let seed_ids = seed_ids.into_iter().map(|i| self.dataset.train[i].seed_id).collect();
        let plan = BatchPlan { seed_ids, m };
        let batch =
            materialize_batch(&plan, &self.dataset.train, &self.config.scheme, &self.dataset.channel_stats, &mut rng)?;
        let acts = forward(&self.params, &batch.images, batch.len()).map_err(|e| with_step_context(e, epoch, step))?;
        self.config
            .inv_layers
            .iter()
            .map(|&l| {
                match invariance_loss(acts.tap(l), batch.len(), acts.dim(l), &batch.groups, self.config.variant) {
                    Ok(v) => Ok(Some(v)),
                    Err(Error::DegenerateBatch) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    }

    fn monitoring(&self) -> bool {
        !self.config.invariance_mode && self.config.monitor_invariance && !self.config.inv_layers.is_empty()
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let lr = self.config.learning_rate_at(epoch);
        let plans = self.plan_epoch();
        let n_layers = self.config.inv_layers.len();
        let mut ce_sum = 0.0;
        let mut total_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        let mut inv_sum = vec![0.0; n_layers];
        let mut inv_count = vec![0usize; n_layers];
        let mut degenerate = 0;
        let mut accumulate = |losses: &[Option<f64>]| {
            for (k, l) in losses.iter().enumerate() {
                if let Some(v) = l {
                    inv_sum[k] += v;
                    inv_count[k] += 1;
                }
            }
        };

        for (step, plan) in plans.iter().enumerate() {
            let batch = self.materialize(plan, epoch, step)?;
            let stats = self.step(&batch, lr, epoch, step)?;
            ce_sum += stats.cross_entropy;
            total_sum += stats.total;
            correct += stats.correct;
            seen += stats.batch;
            degenerate += stats.degenerate;
            if self.config.invariance_mode {
                accumulate(&stats.inv_losses);
            } else if self.monitoring() && step % self.config.monitor_every == 0 {
                let probe = self.probe_invariance(epoch, step)?;
                accumulate(&probe);
            }
        }
        let steps = plans.len().max(1) as f64;
        self.epochs_done = epoch;
        Ok(EpochLog {
            epoch,
            learning_rate: lr,
            cross_entropy: ce_sum / steps,
            total_loss: total_sum / steps,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            inv_losses: inv_sum.iter().zip(&inv_count).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect(),
            degenerate_skips: degenerate,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn with_step_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NumericOverflow { layer } => {
            Error::NonFiniteLoss { epoch, step, term: format!("activation conv{layer}") }
        }
        other => other,
    }
}

fn clip_gradients(grads: &mut [ConvParams<f32>], limit: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.weight.iter().chain(&g.bias))
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = (limit / norm) as f32;
        for g in grads {
            g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one.
pub fn train_with<F>(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: F,
) -> Result<(ModelParams<f32>, Vec<EpochLog>)>
where
    F: FnMut(&EpochLog, &ModelParams<f32>) -> Result<()>,
{
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let mut logs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let log = trainer.run_epoch()?;
        on_epoch(&log, trainer.params())?;
        logs.push(log);
    }
    Ok((trainer.into_params(), logs))
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(ModelParams<f32>, Vec<EpochLog>)> {
    train_with(config, dataset, |_, _| Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overhead {
    pub baseline_seconds: f64,
    pub invariance_seconds: f64,
    /// Median invariance-mode step time over median baseline step time.
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const WARMUP_STEPS: usize = 2;

/// Per-step wall time of invariance mode relative to a baseline that does
/// no invariance monitoring. Steps of the two modes are interleaved so
/// machine-load drift affects both alike; batch materialization is timed.
pub fn measure_overhead(config: &TrainConfig, dataset: &Dataset, n_steps: usize) -> Result<Overhead> {
    if n_steps < 20 {
        return Err(Error::invalid("overhead measurement needs at least 20 timed steps"));
    }
    let base_cfg = TrainConfig { invariance_mode: false, monitor_invariance: false, ..config.clone() };
    let inv_cfg = TrainConfig { invariance_mode: true, ..config.clone() };
    let mut trainers = [Trainer::new(base_cfg, dataset)?, Trainer::new(inv_cfg, dataset)?];
    let mut times: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut plans: [Vec<BatchPlan>; 2] = [Vec::new(), Vec::new()];
    for i in 0..WARMUP_STEPS + n_steps {
        for (k, trainer) in trainers.iter_mut().enumerate() {
            if plans[k].is_empty() {
                plans[k] = trainer.plan_epoch();
                plans[k].reverse();
            }
            let plan = plans[k].pop().expect("an epoch has at least one step");
            let start = Instant::now();
            let batch = trainer.materialize(&plan, 1, i)?;
            trainer.step(&batch, config.learning_rate, 1, i)?;
            if i >= WARMUP_STEPS {
                times[k].push(start.elapsed().as_secs_f64());
            }
        }
    }
    let [base, inv] = times;
    let baseline_seconds = median(base);
    let invariance_seconds = median(inv);
    Ok(Overhead { baseline_seconds, invariance_seconds, ratio: invariance_seconds / baseline_seconds })
}

/// Median wall time of `n_steps` training steps after a short warm-up.
pub fn median_step_seconds(config: &TrainConfig, dataset: &Dataset, n_steps: usize) -> Result<f64> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let mut plans = Vec::new();
    let mut times = Vec::with_capacity(n_steps);
    for i in 0..WARMUP_STEPS + n_steps {
        if plans.is_empty() {
            plans = trainer.plan_epoch();
            plans.reverse();
        }
        let plan = plans.pop().expect("an epoch has at least one step");
        let start = Instant::now();
        let batch = trainer.materialize(&plan, 1, i)?;
        trainer.step(&batch, config.learning_rate, 1, i)?;
        if i >= WARMUP_STEPS {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(median(times))
}
