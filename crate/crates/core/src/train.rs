//! 1cycle SGD training, gradient clipping, the single-sequence overfit
//! check and the learning-rate range test.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentMode;
use crate::autodiff::Gradients;
use crate::encoder::{EncodedSequence, StreamSet};
use crate::eval::{evaluate_sequences, EvalError, EvalReport};
use crate::model::{sequence_loss_and_grads, sequence_nll, DropoutPlan, ModelConfig, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("non-finite gradient in {tensor} at element {index}")]
    NonFiniteGradient { tensor: String, index: usize },
    /// Parameters are left at their last finite state.
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
        last_good: Box<ModelParams>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    pub momentum_low: f64,
    pub momentum_high: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub augment: AugmentMode,
    pub streams: StreamSet,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            warmup_epochs: 18,
            lr_start: 0.008,
            lr_max: 0.2,
            lr_final: 0.0002,
            momentum_low: 0.8,
            momentum_high: 0.95,
            clip_norm: 5.0,
            seed: 0,
            augment: AugmentMode::Transpose,
            streams: StreamSet::FULL,
            model: ModelConfig::tonicnet(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(TrainError::BadConfig(format!(
                "warmup epochs ({}) must be fewer than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr_final > 0.0 && self.lr_start > 0.0 && self.lr_max >= self.lr_start.max(self.lr_final)) {
            return Err(TrainError::BadConfig("learning rates must be positive with lr_max largest".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_low) || !(self.momentum_low..1.0).contains(&self.momentum_high) {
            return Err(TrainError::BadConfig("momentum must satisfy 0 ≤ low ≤ high < 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(TrainError::BadConfig("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleState {
    pub step: usize,
    pub warmup_steps: usize,
    pub anneal_steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a * (1.0 - w) + b * w
}

/// Learning rate and momentum for optimizer step `step`. Warmup is linear;
/// the anneal is a half cosine that lands on `lr_final` at the last step.
pub fn schedule_at(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> ScheduleState {
    let warmup_steps = config.warmup_epochs * steps_per_epoch;
    let anneal_steps = (config.epochs - config.warmup_epochs) * steps_per_epoch;
    let (lr, momentum) = if step < warmup_steps {
        let w = step as f64 / warmup_steps as f64;
        (
            lerp(config.lr_start, config.lr_max, w),
            lerp(config.momentum_high, config.momentum_low, w),
        )
    } else {
        let t = if anneal_steps > 1 {
            ((step - warmup_steps) as f64 / (anneal_steps - 1) as f64).min(1.0)
        } else {
            1.0
        };
        let w = (1.0 - (PI * t).cos()) / 2.0;
        (
            lerp(config.lr_max, config.lr_final, w),
            lerp(config.momentum_low, config.momentum_high, w),
        )
    };
    ScheduleState {
        step,
        warmup_steps,
        anneal_steps,
        lr,
        momentum,
    }
}

/// Momentum buffers, one per parameter tensor, zero-initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Vec<Vec<f32>>);

impl Velocity {
    pub fn zeros(params: &ModelParams) -> Self {
        Velocity(params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect())
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.0[i]
    }
}

/// v ← momentum·v + g;  θ ← θ − lr·v. Nothing is modified when any gradient
/// entry is non-finite.
pub fn sgd_update(
    params: &mut ModelParams,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                tensor: params.names()[i].clone(),
                index,
            });
        }
    }
    let (lr, momentum) = (lr as f32, momentum as f32);
    for ((tensor, g), v) in params.tensors_mut().iter_mut().zip(grads.iter()).zip(&mut velocity.0) {
        if g.is_empty() {
            continue;
        }
        for ((theta, g), v) in tensor.values_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + *g;
            *theta -= lr * *v;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping was needed).
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if !norm.is_finite() || norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    // Scaling in f32 can round the norm up by a few ulps; shave the factor so
    // the result never exceeds the bound.
    let factor = (scale * (1.0 - 1e-7)) as f32;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
    scale
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_nll: f64,
    pub val_full_nll: f64,
    pub val_ncl_nll: f64,
    pub val_full_acc: f64,
    pub val_ncl_acc: f64,
    pub lr_start_of_epoch: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    fn new(epoch: usize, mean_train_nll: f64, report: &EvalReport, lr: f64, wall_seconds: f64) -> Self {
        EpochRecord {
            epoch,
            mean_train_nll,
            val_full_nll: report.full_nll,
            val_ncl_nll: report.ncl_nll,
            val_full_acc: report.full_acc,
            val_ncl_acc: report.ncl_acc,
            lr_start_of_epoch: lr,
            wall_seconds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation Full NLL.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Runs the full regime. `on_epoch` sees each log record (and the current
/// best parameters) as soon as the epoch's validation finishes.
pub fn train(
    mut params: ModelParams,
    train_set: &[EncodedSequence],
    valid_set: &[EncodedSequence],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = Velocity::zeros(&params);
    let steps_per_epoch = train_set.len();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr_start = schedule_at(config, step, steps_per_epoch).lr;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let plan = DropoutPlan::sample(&params.config, &mut rng);
            let (loss, mut grads) = match sequence_loss_and_grads(&params, &train_set[i], &plan) {
                Ok(r) => r,
                Err(ModelError::NonFinite { .. }) => {
                    return Err(TrainError::Divergence {
                        epoch,
                        step,
                        reason: "non-finite loss".into(),
                        last_good: Box::new(params),
                    })
                }
                Err(e) => return Err(e.into()),
            };
            clip_gradients(&mut grads, config.clip_norm);
            let sched = schedule_at(config, step, steps_per_epoch);
            if let Err(e) = sgd_update(&mut params, &grads, sched.lr, sched.momentum, &mut velocity) {
                return Err(TrainError::Divergence {
                    epoch,
                    step,
                    reason: e.to_string(),
                    last_good: Box::new(params),
                });
            }
            loss_sum += loss as f64;
            step += 1;
        }
        let report = evaluate_sequences(&params, valid_set, "valid")?;
        let record = EpochRecord::new(
            epoch,
            loss_sum / steps_per_epoch as f64,
            &report,
            lr_start,
            started.elapsed().as_secs_f64(),
        );
        if best.as_ref().is_none_or(|(nll, _, _)| report.full_nll < *nll) {
            best = Some((report.full_nll, epoch, params.clone()));
        }
        on_epoch(&record, &best.as_ref().expect("set above").2);
        log.push(record);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            steps: 2000,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverfitReport {
    /// Training loss before each step.
    pub losses: Vec<f32>,
    /// Eval-mode NLL after the last step.
    pub final_nll: f64,
    /// Steps actually taken (stops early once `target` is reached, if given).
    pub steps: usize,
}

/// Memorises one sequence with a fixed learning rate and no dropout.
/// Stops as soon as the eval-mode NLL falls below `target`, checked every
/// 50 steps and at the end.
pub fn overfit(
    params: &mut ModelParams,
    seq: &EncodedSequence,
    config: &OverfitConfig,
    target: Option<f64>,
) -> Result<OverfitReport> {
    let mut velocity = Velocity::zeros(params);
    let plan = DropoutPlan::eval();
    let mut losses = Vec::with_capacity(config.steps);
    let mut final_nll = sequence_nll(params, seq, &plan)?.total as f64;
    for step in 0..config.steps {
        let (loss, mut grads) = sequence_loss_and_grads(params, seq, &plan)?;
        losses.push(loss);
        clip_gradients(&mut grads, config.clip_norm);
        sgd_update(params, &grads, config.lr, config.momentum, &mut velocity)?;
        if (step + 1) % 50 == 0 || step + 1 == config.steps {
            final_nll = sequence_nll(params, seq, &plan)?.total as f64;
            if target.is_some_and(|t| final_nll < t) {
                break;
            }
        }
    }
    Ok(OverfitReport {
        steps: losses.len(),
        losses,
        final_nll,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeTestConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub num_steps: usize,
    pub momentum: f64,
    pub clip_norm: f64,
    pub smoothing: f64,
    /// Stop once the smoothed loss exceeds this multiple of its minimum.
    pub stop_factor: f64,
    pub seed: u64,
}

impl Default for RangeTestConfig {
    fn default() -> Self {
        RangeTestConfig {
            lr_min: 1e-4,
            lr_max: 10.0,
            num_steps: 100,
            momentum: 0.9,
            clip_norm: 5.0,
            smoothing: 0.98,
            stop_factor: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeTestReport {
    pub curve: Vec<RangePoint>,
    /// Learning rate at the steepest descent of the smoothed loss; `None`
    /// when the smoothed loss never falls.
    pub suggested_lr: Option<f64>,
    pub stopped_early: bool,
    pub diverged: bool,
}

/// Learning rate of step `i` on the exponential sweep.
pub fn range_lr(config: &RangeTestConfig, i: usize) -> f64 {
    if config.num_steps < 2 {
        return config.lr_min;
    }
    let t = i as f64 / (config.num_steps - 1) as f64;
    config.lr_min * (config.lr_max / config.lr_min).powf(t)
}

/// Smoothing, early stop and suggestion logic of the range test, separate
/// from the model so it can be driven with synthetic losses.
#[derive(Debug, Clone)]
pub struct RangeTestTracker {
    smoothing: f64,
    stop_factor: f64,
    average: f64,
    best: f64,
    curve: Vec<RangePoint>,
    diverged: bool,
    stopped: bool,
}

impl RangeTestTracker {
    pub fn new(smoothing: f64, stop_factor: f64) -> Self {
        RangeTestTracker {
            smoothing,
            stop_factor,
            average: 0.0,
            best: f64::INFINITY,
            curve: Vec::new(),
            diverged: false,
            stopped: false,
        }
    }

    /// Records one observation; returns false when the sweep should stop.
    pub fn observe(&mut self, lr: f64, loss: f64) -> bool {
        if !loss.is_finite() {
            self.diverged = true;
            self.stopped = true;
            return false;
        }
        let step = self.curve.len();
        self.average = self.smoothing * self.average + (1.0 - self.smoothing) * loss;
        let smoothed = self.average / (1.0 - self.smoothing.powi(step as i32 + 1));
        self.curve.push(RangePoint {
            step,
            lr,
            loss,
            smoothed,
        });
        self.best = self.best.min(smoothed);
        if smoothed > self.stop_factor * self.best {
            self.stopped = true;
            return false;
        }
        true
    }

    /// Lower end of the steepest falling segment of the smoothed curve.
    pub fn suggestion(&self) -> Option<f64> {
        self.curve
            .windows(2)
            .map(|w| (w[1].smoothed - w[0].smoothed, w[0].lr, w[0].smoothed))
            // Ignore rounding-level wiggles of a flat curve.
            .filter(|(slope, _, level)| *slope < -1e-9 * level.abs())
            .map(|(slope, lr, _)| (slope, lr))
            .fold(None, |best: Option<(f64, f64)>, cur| match best {
                Some(b) if b.0 <= cur.0 => Some(b),
                _ => Some(cur),
            })
            .map(|(_, lr)| lr)
    }

    pub fn finish(self, num_steps: usize) -> RangeTestReport {
        RangeTestReport {
            suggested_lr: self.suggestion(),
            stopped_early: self.stopped && self.curve.len() < num_steps,
            diverged: self.diverged,
            curve: self.curve,
        }
    }
}

/// Sweeps the learning rate exponentially over `num_steps` single-sequence
/// SGD steps, cycling through a seeded shuffle of `train_set`.
pub fn lr_range_test(
    mut params: ModelParams,
    train_set: &[EncodedSequence],
    config: &RangeTestConfig,
) -> Result<RangeTestReport> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if !(config.lr_min > 0.0 && config.lr_min < config.lr_max) || config.num_steps < 10 {
        return Err(TrainError::BadConfig(
            "range test needs 0 < lr_min < lr_max and at least 10 steps".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut velocity = Velocity::zeros(&params);
    let mut tracker = RangeTestTracker::new(config.smoothing, config.stop_factor);
    for i in 0..config.num_steps {
        let lr = range_lr(config, i);
        let seq = &train_set[order[i % order.len()]];
        let plan = DropoutPlan::sample(&params.config, &mut rng);
        let (loss, mut grads) = match sequence_loss_and_grads(&params, seq, &plan) {
            Ok(r) => r,
            Err(ModelError::NonFinite { .. }) => {
                tracker.observe(lr, f64::NAN);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if !tracker.observe(lr, loss as f64) {
            break;
        }
        clip_gradients(&mut grads, config.clip_norm);
        if sgd_update(&mut params, &grads, lr, config.momentum, &mut velocity).is_err() {
            tracker.observe(lr, f64::NAN);
            break;
        }
    }
    Ok(tracker.finish(config.num_steps))
}
