//! Training protocol: seeded shuffling, augmentation, optional mixup,
//! soft-label cross-entropy, cosine-annealed optimizer steps, staged
//! unfreezing, early stopping, and the evaluation metrics.

mod metrics;
mod optim;
mod schedule;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use thiserror::Error;

use crate::augment::{mix_batches, sample_mixup_lambda, train_transform, validation_resize, AugmentConfig, AugmentError};
use crate::models::{Classifier, ModelError, ModelSpec};
use crate::rng::{shuffle, stream, Domain};
use crate::tensor::{LrGroup, Mode, ParameterRegistry, Tape, Tensor, TensorError};
use crate::{Image, Label};

pub use metrics::{aggregate_seeds, confusion_and_prf, mean_std, pairwise_auc, roc_auc, AggregateReport, Confusion, MeanStd, MetricError, MetricReport, Prf};
pub use optim::{GroupLr, Optimizer, OptimizerConstants, OptimizerKind};
pub use schedule::{apply_unfreeze_schedule, best_index, cosine_lr, early_stop_check, StopDecision};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("the {0} set is empty")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample {index} has shape {shape:?}, expected [3, H, W] like the first sample")]
    InconsistentSample { index: usize, shape: [usize; 3] },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// A preprocessed window and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: Label,
}

/// Seconds since an arbitrary origin. The core crate has no clock of its own.
pub trait Clock {
    fn now_seconds(&self) -> f64;
}

/// Clock that never advances; timings come out as zero.
pub struct NoClock;

impl Clock for NoClock {
    fn now_seconds(&self) -> f64 {
        0.0
    }
}

/// Runs independent per-sample work. Each item carries its own random
/// stream, so any executor yields the same results in the same order.
pub trait Executor: Sync {
    fn map_images(&self, n: usize, f: &(dyn Fn(usize) -> Image + Sync)) -> Vec<Image>;
}

pub struct Sequential;

impl Executor for Sequential {
    fn map_images(&self, n: usize, f: &(dyn Fn(usize) -> Image + Sync)) -> Vec<Image> {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Epoch,
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Everything trainable from the first step at the head learning rate.
    FromScratch,
    /// Backbones frozen; blocks released by the unfreeze schedule.
    StagedUnfreeze,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub head_lr: f64,
    pub unfrozen_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub cosine_t_max: usize,
    pub schedule_unit: ScheduleUnit,
    /// Also anneal the unfrozen-block learning rate.
    pub anneal_unfrozen: bool,
    pub patience: usize,
    /// `(epoch, number of last blocks)` pairs.
    pub unfreeze_schedule: Vec<(usize, usize)>,
    pub optimizer: OptimizerKind,
    pub seeds: Vec<u64>,
    /// `None` follows the model path (on for ViT-bearing models).
    pub mixup: Option<bool>,
    pub mode: TrainMode,
    pub augment: AugmentConfig,
    /// Off: training images take the deterministic validation resize.
    pub augment_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head_lr: 1e-4,
            unfrozen_lr: 1e-6,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            cosine_t_max: 50,
            schedule_unit: ScheduleUnit::Epoch,
            anneal_unfrozen: false,
            patience: 5,
            unfreeze_schedule: vec![(5, 1), (8, 2)],
            optimizer: OptimizerKind::AdamW,
            seeds: vec![0, 1, 2],
            mixup: None,
            mode: TrainMode::StagedUnfreeze,
            augment: AugmentConfig::default(),
            augment_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.head_lr > 0.0 && self.unfrozen_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        self.augment.validate()?;
        Ok(())
    }

    fn lr_at(&self, epoch: usize, step: usize) -> GroupLr {
        let t = match self.schedule_unit {
            ScheduleUnit::Epoch => epoch,
            ScheduleUnit::Step => step,
        };
        GroupLr {
            head: cosine_lr(t, self.head_lr, self.cosine_t_max),
            unfrozen: if self.anneal_unfrozen {
                cosine_lr(t, self.unfrozen_lr, self.cosine_t_max)
            } else {
                self.unfrozen_lr
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub report: MetricReport,
    pub lr: GroupLr,
    /// Trainable scalars during this epoch.
    pub trainable_params: usize,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub total_steps: usize,
    pub stopped_early: bool,
    pub total_params: usize,
    pub seconds: f64,
}

impl RunRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }
}

pub struct FitOutcome {
    pub model: Classifier,
    /// Parameters at the best validation-loss epoch.
    pub best: ParameterRegistry<f32>,
    pub record: RunRecord,
}

/// Clock, executor and a per-epoch callback.
pub struct FitContext<'a> {
    pub clock: &'a dyn Clock,
    pub exec: &'a dyn Executor,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl Default for FitContext<'_> {
    fn default() -> Self {
        FitContext {
            clock: &NoClock,
            exec: &Sequential,
            on_epoch: None,
        }
    }
}

/// Augmentation settings as the model path dictates them.
pub fn effective_augment(spec: &ModelSpec, cfg: &TrainConfig) -> AugmentConfig {
    AugmentConfig {
        out_size: spec.image_size(),
        imagenet_normalize: !spec.kind.transformer_path(),
        ..cfg.augment.clone()
    }
}

fn check_samples(samples: &[Sample], what: &'static str) -> Result<[usize; 3], TrainError> {
    let first = samples.first().ok_or(TrainError::EmptyDataset(what))?.image.shape();
    for (index, s) in samples.iter().enumerate() {
        let shape = s.image.shape();
        if shape != first || shape[0] != 3 {
            return Err(TrainError::InconsistentSample { index, shape });
        }
    }
    Ok(first)
}

fn stack(images: &[Image]) -> Result<Tensor<f32>, TensorError> {
    let [c, h, w] = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

fn one_hot(labels: &[Label], k: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; labels.len() * k];
    for (i, l) in labels.iter().enumerate() {
        data[i * k + l.index()] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), k], data).expect("one-hot shape")
}

/// Validation loss, class-1 probabilities and the metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub report: MetricReport,
}

/// Evaluation-mode pass over already model-sized inputs.
pub fn evaluate_inputs(model: &Classifier, reg: &ParameterRegistry<f32>, inputs: &[Image], labels: &[Label], batch_size: usize) -> Result<Evaluation, TrainError> {
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let k = model.num_classes();
    let mut rng = stream(0, Domain::Dropout, 0, 0);
    let mut loss_sum = 0.0;
    let mut scores = Vec::with_capacity(inputs.len());
    for (chunk, ls) in inputs.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
        let mut tape = Tape::new();
        let x = tape.constant(stack(chunk)?);
        let logits = model.forward(&mut tape, reg, x, Mode::Eval, &mut rng)?;
        let loss = tape.soft_cross_entropy(logits, &one_hot(ls, k))?;
        loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
        for row in tape.value(logits).data().chunks(k) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            scores.push((row[Label::Quark.index()] - max).exp() / denom);
        }
    }
    let labels: Vec<u8> = labels.iter().map(|l| l.index() as u8).collect();
    let report = MetricReport::from_scores(&scores, &labels)?;
    Ok(Evaluation {
        loss: loss_sum / inputs.len() as f64,
        scores,
        labels,
        report,
    })
}

/// Validation transform, then [`evaluate_inputs`].
pub fn evaluate(model: &Classifier, reg: &ParameterRegistry<f32>, samples: &[Sample], batch_size: usize, exec: &dyn Executor) -> Result<Evaluation, TrainError> {
    check_samples(samples, "evaluation")?;
    let (size, imagenet) = (model.spec.image_size(), !model.spec.kind.transformer_path());
    let inputs = exec.map_images(samples.len(), &|i| validation_resize(&samples[i].image, size, imagenet));
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    evaluate_inputs(model, reg, &inputs, &labels, batch_size)
}

/// Trains one model from `seed` and keeps the best validation-loss weights.
pub fn fit(train: &[Sample], val: &[Sample], spec: &ModelSpec, cfg: &TrainConfig, seed: u64, mut ctx: FitContext<'_>) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    check_samples(train, "training")?;
    check_samples(val, "validation")?;
    let mut reg = ParameterRegistry::<f32>::new();
    let model = Classifier::build(spec, &mut reg, seed)?;
    let total_params = reg.total_count();
    match cfg.mode {
        TrainMode::FromScratch => reg.set_all_trainable(true, LrGroup::Head),
        TrainMode::StagedUnfreeze => model.freeze_backbones(&mut reg),
    }
    let aug = effective_augment(spec, cfg);
    let mixup = cfg.mixup.unwrap_or(spec.kind.transformer_path());
    let k = model.num_classes();
    let start = ctx.clock.now_seconds();

    let val_inputs = ctx.exec.map_images(val.len(), &|i| validation_resize(&val[i].image, aug.out_size, aug.imagenet_normalize));
    let val_labels: Vec<Label> = val.iter().map(|s| s.label).collect();

    let mut opt = Optimizer::<f32>::new(cfg.optimizer);
    let mut best = reg.clone();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut val_history = Vec::new();
    let mut step = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let epoch_start = ctx.clock.now_seconds();
        if cfg.mode == TrainMode::StagedUnfreeze {
            apply_unfreeze_schedule(epoch, &model, &mut reg, &cfg.unfreeze_schedule);
        }
        let trainable_params = reg.trainable_count();
        let lr = cfg.lr_at(epoch, step);

        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut stream(seed, Domain::Shuffle, epoch as u64 + 1, 0));
        let (mut loss_sum, mut seen, epoch_steps_start) = (0.0f64, 0usize, step);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images = ctx.exec.map_images(idx.len(), &|j| {
                let i = idx[j];
                if cfg.augment_enabled {
                    train_transform(&train[i].image, &aug, &mut stream(seed, Domain::Augment, epoch as u64, i as u64))
                } else {
                    validation_resize(&train[i].image, aug.out_size, aug.imagenet_normalize)
                }
            });
            let labels: Vec<Label> = idx.iter().map(|&i| train[i].label).collect();
            let (mut x, mut y) = (stack(&images)?, one_hot(&labels, k));
            if mixup {
                let mut rng = stream(seed, Domain::Mixup, epoch as u64, bi as u64);
                let mut perm: Vec<usize> = (0..idx.len()).collect();
                shuffle(&mut perm, &mut rng);
                let lambda = sample_mixup_lambda(aug.mixup_alpha, &mut rng)?;
                let px: Vec<Image> = perm.iter().map(|&p| images[p].clone()).collect();
                let pl: Vec<Label> = perm.iter().map(|&p| labels[p]).collect();
                let (xb, yb) = (stack(&px)?, one_hot(&pl, k));
                (x, y) = mix_batches((&x, &y), (&xb, &yb), lambda)?;
            }
            reg.zero_grad();
            let loss = train_step(&model, &mut reg, x, &y, &mut stream(seed, Domain::Dropout, epoch as u64, bi as u64))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            opt.step(&mut reg, cfg.lr_at(epoch, step), cfg.weight_decay);
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            step += 1;
        }

        let eval = evaluate_inputs(&model, &reg, &val_inputs, &val_labels, cfg.batch_size)?;
        if !eval.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, step });
        }
        val_history.push(eval.loss);
        if best_index(&val_history) == Some(epoch) {
            best = reg.clone();
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: eval.loss,
            report: eval.report,
            lr,
            trainable_params,
            steps: step - epoch_steps_start,
            seconds: ctx.clock.now_seconds() - epoch_start,
        };
        if let Some(cb) = ctx.on_epoch.as_mut() {
            cb(&rec);
        }
        epochs.push(rec);
        if early_stop_check(&val_history, cfg.patience) == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let best_epoch = best_index(&val_history).unwrap_or(0);
    Ok(FitOutcome {
        model,
        best,
        record: RunRecord {
            seed,
            epochs,
            best_epoch,
            total_steps: step,
            stopped_early,
            total_params,
            seconds: ctx.clock.now_seconds() - start,
        },
    })
}

/// Forward, loss and backward for one batch; returns the batch loss.
fn train_step<R: Rng + ?Sized>(model: &Classifier, reg: &mut ParameterRegistry<f32>, x: Tensor<f32>, y: &Tensor<f32>, rng: &mut R) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = model.forward(&mut tape, reg, xv, Mode::Train, rng)?;
    let loss = tape.soft_cross_entropy(logits, y)?;
    tape.backward(loss, reg)?;
    Ok(tape.value(loss).item() as f64)
}

/// Mean wall-clock milliseconds of single-image evaluation-mode forward
/// passes: `warmup` untimed passes, then `runs` timed ones.
pub fn measure_inference_ms(model: &Classifier, reg: &ParameterRegistry<f32>, clock: &dyn Clock, warmup: usize, runs: usize) -> Result<f64, TrainError> {
    let s = model.spec.image_size();
    let mut rng = stream(0, Domain::Bench, 0, 0);
    let image = Tensor::from_vec(&[1, 3, s, s], (0..3 * s * s).map(|_| rng.random::<f32>()).collect())?;
    let mut run = || -> Result<(), TrainError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        model.forward(&mut tape, reg, x, Mode::Eval, &mut rng)?;
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let t0 = clock.now_seconds();
    for _ in 0..runs.max(1) {
        run()?;
    }
    Ok((clock.now_seconds() - t0) * 1000.0 / runs.max(1) as f64)
}
