use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{add_param, Init, ModelError};
use crate::tensor::{ParamId, ParameterRegistry, Tape, TensorError, Var};
use crate::Scalar;

/// Stage widths of the conv backbone. Each stage is a padded 3×3 conv,
/// ReLU, and a 2×2 average pool that halves the resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvConfig {
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub kernel: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            widths: vec![16, 32, 64],
            in_channels: 3,
            kernel: 3,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self, image_size: usize) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(ModelError::InvalidConfig("conv backbone needs at least one non-empty stage".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig("conv kernel must be odd".into()));
        }
        let down = 1usize << self.widths.len();
        if image_size == 0 || image_size % down != 0 {
            return Err(ModelError::InvalidConfig(format!("image size {image_size} is not divisible by {down}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvNet {
    pub prefix: String,
    pub config: ConvConfig,
    pub stages: Vec<ConvStage>,
}

impl ConvNet {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(reg: &mut ParameterRegistry<S>, prefix: &str, cfg: &ConvConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut stages = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let fan_in = c_in * cfg.kernel * cfg.kernel;
            stages.push(ConvStage {
                w: add_param(reg, format!("{prefix}.stages.{i}.w"), &[c_out, c_in, cfg.kernel, cfg.kernel], Init::Kaiming { fan_in }, rng)?,
                b: add_param(reg, format!("{prefix}.stages.{i}.b"), &[c_out], Init::Zeros, rng)?,
            });
            c_in = c_out;
        }
        Ok(ConvNet {
            prefix: prefix.into(),
            config: cfg.clone(),
            stages,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().unwrap_or(&0)
    }

    /// Globally average-pooled feature `[B, D_conv]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, images: Var) -> Result<Var, TensorError> {
        let mut x = images;
        for stage in &self.stages {
            let w = tape.param(reg, stage.w);
            let b = tape.param(reg, stage.b);
            x = tape.conv2d(x, w, Some(b), 1, self.config.kernel / 2)?;
            x = tape.relu(x);
            x = tape.avg_pool2(x)?;
        }
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        Ok(tape.mean_last(x))
    }
}
