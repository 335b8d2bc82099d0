//! One-factor-at-a-time sensitivity sweeps.

use qgjet_core::models::ModelKind;
use qgjet_core::train::{Clock, EpochRecord, Executor, Sample, TrainError};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::pipeline::train_seeds;
use crate::report::MetricsRow;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown sweep axis `{0}`; expected one of dataset_size, model_size, batch_size, learning_rate, optimizer, weight_decay, epochs, dropout")]
    UnknownAxis(String),
    #[error("no sweep values given")]
    NoValues,
    #[error("value `{value}`: {source}")]
    Value { value: String, source: ConfigError },
    #[error("the dropout axis needs a hybrid model")]
    DropoutWithoutHybrid,
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Fraction of the training set.
    DatasetSize,
    /// ViT embedding width; conv stage widths scale as D/4, D/2, D.
    ModelSize,
    BatchSize,
    /// Head learning rate.
    LearningRate,
    Optimizer,
    WeightDecay,
    Epochs,
    /// Hybrid-head dropout.
    Dropout,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 8] = [
        SweepAxis::DatasetSize,
        SweepAxis::ModelSize,
        SweepAxis::BatchSize,
        SweepAxis::LearningRate,
        SweepAxis::Optimizer,
        SweepAxis::WeightDecay,
        SweepAxis::Epochs,
        SweepAxis::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::DatasetSize => "dataset_size",
            SweepAxis::ModelSize => "model_size",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::Optimizer => "optimizer",
            SweepAxis::WeightDecay => "weight_decay",
            SweepAxis::Epochs => "epochs",
            SweepAxis::Dropout => "dropout",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SweepError> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| SweepError::UnknownAxis(s.into()))
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig, SweepError> {
        let mut c = base.clone();
        let wrap = |source| SweepError::Value { value: value.into(), source };
        match self {
            SweepAxis::DatasetSize => c.set("dataset_fraction", value),
            SweepAxis::ModelSize => c.set("embed_dim", value).and_then(|_| {
                let d = c.spec.vit.embed_dim;
                c.spec.conv.widths = vec![(d / 4).max(1), (d / 2).max(1), d];
                Ok(())
            }),
            SweepAxis::BatchSize => c.set("batch_size", value),
            SweepAxis::LearningRate => c.set("head_lr", value),
            SweepAxis::Optimizer => c.set("optimizer", value),
            SweepAxis::WeightDecay => c.set("weight_decay", value),
            SweepAxis::Epochs => c.set("epochs", value),
            SweepAxis::Dropout => {
                if !matches!(c.spec.kind, ModelKind::Hybrid2 | ModelKind::Hybrid3) {
                    return Err(SweepError::DropoutWithoutHybrid);
                }
                c.set("dropout", value)
            }
        }
        .map_err(wrap)?;
        c.validate().map_err(wrap)?;
        Ok(c)
    }
}

/// Resolved configuration for every value, checked before any training.
pub fn plan(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<RunConfig>, SweepError> {
    if values.is_empty() {
        return Err(SweepError::NoValues);
    }
    values
        .iter()
        .map(|v| {
            let mut c = axis.apply(base, v)?;
            c.train.seeds.truncate(1);
            Ok(c)
        })
        .collect()
}

/// Trains one run per value with the first configured seed and everything
/// else held fixed; one table row per value, in order.
pub fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    train: &[Sample],
    val: &[Sample],
    exec: &dyn Executor,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<Vec<MetricsRow>, SweepError> {
    let configs = plan(base, axis, values)?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let name = format!("{} {}={}", cfg.spec.kind.name(), axis.name(), value);
        let out = train_seeds(&name, cfg, train, val, exec, clock, &mut |_, e| on_epoch(&name, e))?;
        rows.push(out.row);
    }
    Ok(rows)
}
