//! Loss, AdamW, the staged learning rate, early stopping and the epoch loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_term, ParamStore, Tape};
use crate::data::{self, AugmentParams, DatasetSplit, LabeledImage};
use crate::layers::{apply_running_updates, Context};
use crate::metrics::{self, MetricsReport};
use crate::models::{Model, DECISION_THRESHOLD};
use crate::real::{self, Real};
use crate::{rng_from_seed, Error, Mode, Result, Tensor};

/// Source of wall-clock seconds. Only differences are used.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that never advances.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_stages: Vec<Real>,
    /// First epoch of every stage after the first.
    pub stage_boundaries: Vec<usize>,
    pub label_smoothing: Real,
    pub weight_decay: Real,
    pub early_stop_patience: usize,
    pub min_delta: Real,
    pub restore_best: bool,
    pub seed: u64,
    pub data_fraction: Real,
    /// Fraction of the training portion held out for validation.
    pub val_frac: Real,
    /// On-the-fly augmentation of training batches; `None` disables it.
    /// Serialized as `false`, `true` (default ranges) or a table.
    #[serde(with = "augment_setting")]
    pub augment: Option<AugmentParams>,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    /// Batch size used for validation and evaluation passes.
    pub eval_batch: usize,
}

mod augment_setting {
    use super::AugmentParams;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Setting {
        Flag(bool),
        Params(AugmentParams),
    }

    pub fn serialize<S: Serializer>(v: &Option<AugmentParams>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(p) => Setting::Params(*p),
            None => Setting::Flag(false),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<AugmentParams>, D::Error> {
        Ok(match Setting::deserialize(d)? {
            Setting::Flag(true) => Some(AugmentParams::default()),
            Setting::Flag(false) => None,
            Setting::Params(p) => Some(p),
        })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            batch_size: 32,
            lr_stages: alloc::vec![3e-4, 6e-4, 1.2e-4],
            stage_boundaries: alloc::vec![10, 20],
            label_smoothing: 0.1,
            weight_decay: 1e-4,
            early_stop_patience: 5,
            min_delta: 1e-6,
            restore_best: true,
            seed: 42,
            data_fraction: 1.0,
            val_frac: 0.1,
            augment: Some(AugmentParams::default()),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    /// Sets `max_epochs` and spaces the stage boundaries into equal parts.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.max_epochs = epochs;
        let k = self.lr_stages.len();
        self.stage_boundaries = (1..k).map(|i| (i * epochs / k).max(i)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(Error::contract("TrainConfig", detail));
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.lr_stages.is_empty() || self.lr_stages.iter().any(|&r| !(r > 0.0)) {
            return bad(format!("learning rates {:?} must be > 0", self.lr_stages));
        }
        if self.stage_boundaries.len() + 1 != self.lr_stages.len() {
            return bad(format!(
                "{} rates need {} boundaries, got {}",
                self.lr_stages.len(),
                self.lr_stages.len() - 1,
                self.stage_boundaries.len()
            ));
        }
        if self.stage_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "boundaries {:?} not strictly increasing",
                self.stage_boundaries
            ));
        }
        if self.max_epochs > 0 && self.stage_boundaries.iter().any(|&b| b > self.max_epochs) {
            return bad(format!(
                "boundaries {:?} exceed max_epochs {}",
                self.stage_boundaries, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label smoothing {} outside [0,1)",
                self.label_smoothing
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} < 0", self.weight_decay));
        }
        if self.early_stop_patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!(
                "data fraction {} outside (0,1]",
                self.data_fraction
            ));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return bad(format!(
                "validation fraction {} outside (0,1)",
                self.val_frac
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("beta1, beta2 must lie in [0,1) and epsilon > 0".into());
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Smoothed binary cross-entropy of one prediction:
/// `y' = y(1-s) + s/2`, `-[y' ln p + (1-y') ln(1-p)]`.
pub fn bce_loss(p: Real, y: Real, smoothing: Real) -> Real {
    bce_term(p, smooth_target(y, smoothing))
}

pub fn smooth_target(y: Real, smoothing: Real) -> Real {
    y * (1.0 - smoothing) + smoothing / 2.0
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, beta1: Real, beta2: Real, epsilon: Real) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One AdamW update from the gradients stored on each parameter. Decay is
/// decoupled: `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + ε)`. Trainable
/// parameters without a gradient are left alone.
pub fn adamw_step(
    params: &mut ParamStore,
    state: &mut OptimizerState,
    lr: Real,
    weight_decay: Real,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::contract(
            "adamw_step",
            format!("learning rate {lr} must be > 0"),
        ));
    }
    if state.m.len() != params.len() {
        return Err(Error::contract(
            "adamw_step",
            format!(
                "state tracks {} tensors, store has {}",
                state.m.len(),
                params.len()
            ),
        ));
    }
    for ((_, p), m) in params.iter().zip(&state.m) {
        if let Some(g) = &p.grad {
            if g.shape() != p.value.shape() {
                return Err(Error::mismatch("adamw_step", p.value.shape(), g.shape()));
            }
        }
        if m.shape() != p.value.shape() {
            return Err(Error::mismatch("adamw_step", p.value.shape(), m.shape()));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - real::pow(b1, state.step as Real);
    let c2 = 1.0 - real::pow(b2, state.step as Real);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.grad.as_ref().filter(|_| p.trainable) else {
            continue;
        };
        let decay = 1.0 - lr * weight_decay;
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let (mh, vh) = (*m / c1, *v / c2);
            *w *= decay;
            *w -= lr * mh / (real::sqrt(vh) + eps);
        }
    }
    Ok(())
}

/// Piecewise-constant learning rate; stage `i` starts at boundary `i-1`
/// (inclusive).
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<Real> {
    if epoch >= config.max_epochs {
        return Err(Error::contract(
            "lr_at_epoch",
            format!("epoch {epoch} outside [0, {})", config.max_epochs),
        ));
    }
    let stage = config
        .stage_boundaries
        .iter()
        .filter(|&&b| epoch >= b)
        .count();
    config
        .lr_stages
        .get(stage)
        .copied()
        .ok_or_else(|| Error::contract("lr_at_epoch", "fewer rates than stages"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub stop: bool,
    pub best_epoch: usize,
}

/// Stops once the last `patience` epochs all failed to improve the running
/// best by more than `min_delta`.
pub fn early_stop_with(val_losses: &[Real], patience: usize, min_delta: Real) -> EarlyStop {
    let mut best = Real::INFINITY;
    let mut best_epoch = 0;
    let mut since = 0;
    for (i, &l) in val_losses.iter().enumerate() {
        if i == 0 || l < best - min_delta {
            best = l;
            best_epoch = i;
            since = 0;
        } else {
            since += 1;
        }
    }
    EarlyStop {
        stop: !val_losses.is_empty() && since >= patience.max(1),
        best_epoch,
    }
}

pub fn early_stop(val_losses: &[Real], patience: usize) -> EarlyStop {
    early_stop_with(val_losses, patience, 1e-6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub val_loss: Real,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub total_seconds: f64,
}

/// Mean smoothed loss of `model` over `images` in inference mode.
pub fn mean_loss(
    model: &Model,
    images: &[LabeledImage],
    smoothing: Real,
    chunk: usize,
) -> Result<Real> {
    let probs = predict(model, images, chunk)?;
    let total: Real = probs
        .iter()
        .zip(images)
        .map(|(&p, im)| bce_loss(p, im.label as Real, smoothing))
        .sum();
    Ok(total / images.len() as Real)
}

/// Inference-mode probabilities in input order.
pub fn predict(model: &Model, images: &[LabeledImage], chunk: usize) -> Result<Vec<Real>> {
    let refs: Vec<&Tensor> = images.iter().map(|im| &im.pixels).collect();
    model.predict_many(&refs, chunk)
}

/// Metrics of `model` on `images` at `threshold`.
pub fn evaluate(
    model: &Model,
    images: &[LabeledImage],
    threshold: Real,
    chunk: usize,
) -> Result<MetricsReport> {
    let probs = predict(model, images, chunk)?;
    let labels: Vec<u8> = images.iter().map(|im| im.label).collect();
    metrics::derive(metrics::confusion(&probs, &labels, threshold)?)
}

fn require_both_classes(images: &[LabeledImage], what: &str) -> Result<()> {
    let c = data::class_counts(images);
    if c[0] == 0 || c[1] == 0 {
        return Err(Error::Protocol(format!(
            "{what} split is single-class (normal {}, pneumonia {})",
            c[0], c[1]
        )));
    }
    Ok(())
}

/// Splits `n` shuffled indices into batches; a trailing batch of one joins
/// the previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Trains on `split.train`, monitoring `split.validation`. Shuffling,
/// augmentation and dropout draw from one generator seeded by
/// `config.seed`. With `restore_best` the parameters of the lowest
/// validation loss are put back at the end.
pub fn train(
    model: &mut Model,
    split: &DatasetSplit,
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<History> {
    config.validate()?;
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        total_seconds: 0.0,
    };
    if config.max_epochs == 0 {
        return Ok(history);
    }
    require_both_classes(&split.train, "training")?;
    require_both_classes(&split.validation, "validation")?;
    let start = clock.seconds();
    let mut rng = rng_from_seed(config.seed);
    let mut state = OptimizerState::new(&model.params, config.beta1, config.beta2, config.epsilon);
    let mut best: Option<(Real, ParamStore)> = None;
    let mut val_losses = Vec::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 0..config.max_epochs {
        let epoch_start = clock.seconds();
        let lr = lr_at_epoch(config, epoch)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in batches(&order, config.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            for &i in batch {
                let im = &split.train[i].pixels;
                images.push(match &config.augment {
                    Some(p) => data::augment(im, p, rng.gen())?,
                    None => im.clone(),
                });
            }
            let targets: Vec<Real> = batch
                .iter()
                .map(|&i| smooth_target(split.train[i].label as Real, config.label_smoothing))
                .collect();
            let refs: Vec<&Tensor> = images.iter().collect();
            let x = Tensor::stack(&refs)?;
            let (loss, grads, updates) = {
                let mut ctx = Context::new(Mode::Train, &mut rng);
                let mut tape = Tape::with_params(&model.params);
                let xv = tape.constant(x);
                let logits = model.forward_logits(&mut tape, &mut ctx, xv)?;
                let loss = tape.bce_with_logits(logits, targets)?;
                let value = tape.value(loss).item();
                (value, tape.backward(loss)?, ctx.take_updates())
            };
            if !loss.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            loss_sum += loss * batch.len() as Real;
            model.params.store_grads(&grads);
            adamw_step(&mut model.params, &mut state, lr, config.weight_decay)?;
            apply_running_updates(&mut model.params, &updates);
        }
        model.params.zero_grads();
        let train_loss = loss_sum / split.train.len() as Real;
        let val_loss = mean_loss(
            model,
            &split.validation,
            config.label_smoothing,
            config.eval_batch,
        )?;
        val_losses.push(val_loss);
        let verdict = early_stop_with(&val_losses, config.early_stop_patience, config.min_delta);
        if verdict.best_epoch == epoch {
            best = Some((val_loss, model.params.clone()));
        }
        history.best_epoch = Some(verdict.best_epoch);
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            seconds: clock.seconds() - epoch_start,
        });
        if verdict.stop {
            history.stopped_early = true;
            break;
        }
    }
    if config.restore_best {
        if let Some((_, params)) = best {
            model.params = params;
        }
    }
    history.total_seconds = clock.seconds() - start;
    Ok(history)
}

/// One experiment run: the fraction subsample and validation carve-out are
/// keyed by `config.seed`, the model is initialized from the same seed and
/// evaluated on the untouched test portion.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub history: History,
    pub report: MetricsReport,
    pub train_counts: [usize; 2],
}

pub fn run(
    spec: &crate::models::ModelSpec,
    split: &DatasetSplit,
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<RunOutcome> {
    config.validate()?;
    let sub = data::subsample_fraction(split, config.data_fraction, config.seed)?;
    let carved = data::carve_validation(&sub, config.val_frac, config.seed)?;
    let mut model = Model::build(spec, config.seed)?;
    let history = train(&mut model, &carved, config, clock)?;
    let mut report = evaluate(&model, &carved.test, DECISION_THRESHOLD, config.eval_batch)?;
    report.seed = config.seed;
    report.wall_time_s = history.total_seconds as Real;
    Ok(RunOutcome {
        model,
        history,
        report,
        train_counts: data::class_counts(&carved.train),
    })
}
