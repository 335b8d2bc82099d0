//! Line-based `key = value` run configuration with `#` comments.
//!
//! Every key has a default, later assignments win, and
//! [`RunConfig::to_text`] writes the fully resolved set back out in a form
//! [`RunConfig::parse`] reads again.

use std::fmt::Debug;
use std::str::FromStr;

use qgjet_core::models::{ModelKind, ModelSpec};
use qgjet_core::train::{OptimizerKind, ScheduleUnit, TrainConfig, TrainMode};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("line {line}: {source}")]
    AtLine { line: usize, source: Box<ConfigError> },
    #[error("inconsistent configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Share of a single data file held out for validation.
    pub val_fraction: f64,
    /// Share of the training set actually used.
    pub dataset_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: ModelSpec::new(ModelKind::Vit, 64),
            train: TrainConfig::default(),
            val_fraction: 0.2,
            dataset_fraction: 1.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "model",
    "image_size",
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "conv_widths",
    "hybrid_hidden",
    "dropout",
    "mode",
    "optimizer",
    "head_lr",
    "unfrozen_lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "cosine_t_max",
    "schedule_unit",
    "anneal_unfrozen",
    "patience",
    "unfreeze_schedule",
    "seeds",
    "mixup",
    "mixup_alpha",
    "augment",
    "crop_scale",
    "crop_ratio",
    "flip_prob",
    "max_rotation_deg",
    "color_jitter",
    "jitter_bcs",
    "jitter_hue",
    "val_fraction",
    "dataset_fraction",
];

fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), expected }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(|v| v.trim().parse().map_err(|_| bad(key, value, "a comma-separated list of numbers"))).collect()
}

fn pair(key: &str, value: &str) -> Result<(f64, f64), ConfigError> {
    match list::<f64>(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(bad(key, value, "two comma-separated numbers")),
    }
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "on or off")),
    }
}

fn join<T: Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (s, t) = (&mut self.spec, &mut self.train);
        match key {
            "model" => s.kind = ModelKind::parse(value).ok_or_else(|| bad(key, value, "vit, conv, hybrid2 or hybrid3"))?,
            "image_size" => s.vit.image_size = num(key, value)?,
            "patch_size" => s.vit.patch_size = num(key, value)?,
            "embed_dim" => s.vit.embed_dim = num(key, value)?,
            "depth" => s.vit.depth = num(key, value)?,
            "heads" => s.vit.heads = num(key, value)?,
            "mlp_ratio" => s.vit.mlp_ratio = num(key, value)?,
            "conv_widths" => s.conv.widths = list(key, value)?,
            "hybrid_hidden" => s.hybrid.hidden = num(key, value)?,
            "dropout" => s.hybrid.dropout = num(key, value)?,
            "mode" => {
                t.mode = match value {
                    "scratch" => TrainMode::FromScratch,
                    "staged" => TrainMode::StagedUnfreeze,
                    _ => return Err(bad(key, value, "scratch or staged")),
                }
            }
            "optimizer" => t.optimizer = OptimizerKind::parse(value).ok_or_else(|| bad(key, value, "adam, adamw, rmsprop or lion"))?,
            "head_lr" => t.head_lr = num(key, value)?,
            "unfrozen_lr" => t.unfrozen_lr = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.max_epochs = num(key, value)?,
            "cosine_t_max" => t.cosine_t_max = num(key, value)?,
            "schedule_unit" => {
                t.schedule_unit = match value {
                    "epoch" => ScheduleUnit::Epoch,
                    "step" => ScheduleUnit::Step,
                    _ => return Err(bad(key, value, "epoch or step")),
                }
            }
            "anneal_unfrozen" => t.anneal_unfrozen = flag(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "unfreeze_schedule" => {
                t.unfreeze_schedule = if value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|e| {
                            let (a, b) = e.trim().split_once(':').ok_or_else(|| bad(key, value, "epoch:blocks pairs or none"))?;
                            Ok((num(key, a)?, num(key, b)?))
                        })
                        .collect::<Result<_, ConfigError>>()?
                }
            }
            "seeds" => t.seeds = list(key, value)?,
            "mixup" => {
                t.mixup = match value {
                    "auto" => None,
                    _ => Some(flag(key, value).map_err(|_| bad(key, value, "auto, on or off"))?),
                }
            }
            "mixup_alpha" => t.augment.mixup_alpha = num(key, value)?,
            "augment" => t.augment_enabled = flag(key, value)?,
            "crop_scale" => t.augment.crop_scale = pair(key, value)?,
            "crop_ratio" => t.augment.crop_ratio = pair(key, value)?,
            "flip_prob" => t.augment.flip_prob = num(key, value)?,
            "max_rotation_deg" => t.augment.max_rotation_deg = num(key, value)?,
            "color_jitter" => t.augment.color_jitter = flag(key, value)?,
            "jitter_bcs" => t.augment.jitter_bcs = num(key, value)?,
            "jitter_hue" => t.augment.jitter_hue = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "dataset_fraction" => self.dataset_fraction = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (s, t) = (&self.spec, &self.train);
        let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
        Some(match key {
            "model" => s.kind.name().into(),
            "image_size" => s.vit.image_size.to_string(),
            "patch_size" => s.vit.patch_size.to_string(),
            "embed_dim" => s.vit.embed_dim.to_string(),
            "depth" => s.vit.depth.to_string(),
            "heads" => s.vit.heads.to_string(),
            "mlp_ratio" => s.vit.mlp_ratio.to_string(),
            "conv_widths" => join(&s.conv.widths),
            "hybrid_hidden" => s.hybrid.hidden.to_string(),
            "dropout" => format!("{:?}", s.hybrid.dropout),
            "mode" => match t.mode {
                TrainMode::FromScratch => "scratch",
                TrainMode::StagedUnfreeze => "staged",
            }
            .into(),
            "optimizer" => t.optimizer.name().into(),
            "head_lr" => format!("{:?}", t.head_lr),
            "unfrozen_lr" => format!("{:?}", t.unfrozen_lr),
            "weight_decay" => format!("{:?}", t.weight_decay),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.max_epochs.to_string(),
            "cosine_t_max" => t.cosine_t_max.to_string(),
            "schedule_unit" => match t.schedule_unit {
                ScheduleUnit::Epoch => "epoch",
                ScheduleUnit::Step => "step",
            }
            .into(),
            "anneal_unfrozen" => onoff(t.anneal_unfrozen),
            "patience" => t.patience.to_string(),
            "unfreeze_schedule" if t.unfreeze_schedule.is_empty() => "none".into(),
            "unfreeze_schedule" => t.unfreeze_schedule.iter().map(|(e, n)| format!("{e}:{n}")).collect::<Vec<_>>().join(","),
            "seeds" => join(&t.seeds),
            "mixup" => t.mixup.map_or("auto".into(), onoff),
            "mixup_alpha" => format!("{:?}", t.augment.mixup_alpha),
            "augment" => onoff(t.augment_enabled),
            "crop_scale" => join(&[t.augment.crop_scale.0, t.augment.crop_scale.1]),
            "crop_ratio" => join(&[t.augment.crop_ratio.0, t.augment.crop_ratio.1]),
            "flip_prob" => format!("{:?}", t.augment.flip_prob),
            "max_rotation_deg" => format!("{:?}", t.augment.max_rotation_deg),
            "color_jitter" => onoff(t.augment.color_jitter),
            "jitter_bcs" => format!("{:?}", t.augment.jitter_bcs),
            "jitter_hue" => format!("{:?}", t.augment.jitter_hue),
            "val_fraction" => format!("{:?}", self.val_fraction),
            "dataset_fraction" => format!("{:?}", self.dataset_fraction),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim()).map_err(|e| ConfigError::AtLine { line: i + 1, source: Box::new(e) })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("every key prints"))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.spec.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ConfigError::Invalid("val_fraction must lie in (0, 1)".into()));
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return Err(ConfigError::Invalid("dataset_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
