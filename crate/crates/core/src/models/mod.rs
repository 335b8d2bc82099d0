//! Tiny ViT, small conv backbone, and the linear / concat-MLP heads.
//!
//! Models own only [`ParamId`]s; the values live in a [`ParameterRegistry`]
//! and every forward pass records onto a [`Tape`], so one definition serves
//! `f32` training and `f64` gradient checks. Parameter names are
//! dot-separated module paths (`vit0.blocks.3.attn.q.w`), which is what the
//! unfreezing schedule matches on.

mod conv;
mod vit;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{stream, Domain};
use crate::tensor::{Mode, ParamId, ParameterRegistry, Tape, Tensor, TensorError, Var};
use crate::Scalar;

pub use conv::{ConvConfig, ConvNet};
pub use vit::{Attention, EncoderBlock, ViT, ViTConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weight initialisation rules.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
    /// He-normal for ReLU layers, std = sqrt(2 / fan_in).
    Kaiming { fan_in: usize },
}

pub(crate) fn init_tensor<S: Scalar, R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let mut draw = |std: f64| -> Vec<S> {
        (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break S::from_f64(z * std);
                }
            })
            .collect()
    };
    let data = match init {
        Init::Zeros => vec![S::zero(); n],
        Init::Ones => vec![S::one(); n],
        Init::TruncNormal(std) => draw(std),
        Init::Kaiming { fan_in } => draw((2.0 / fan_in as f64).sqrt()),
    };
    Tensor::from_vec(shape, data).expect("init shape")
}

pub(crate) fn add_param<S: Scalar, R: Rng + ?Sized>(
    reg: &mut ParameterRegistry<S>,
    name: String,
    shape: &[usize],
    init: Init,
    rng: &mut R,
) -> Result<ParamId, TensorError> {
    reg.add(&name, init_tensor(shape, init, rng))
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(
        reg: &mut ParameterRegistry<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let mut l = Self::without_bias(reg, name, in_dim, out_dim, init, rng)?;
        l.b = Some(add_param(reg, format!("{name}.b"), &[out_dim], Init::Zeros, rng)?);
        Ok(l)
    }

    pub(crate) fn without_bias<S: Scalar, R: Rng + ?Sized>(
        reg: &mut ParameterRegistry<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(Linear {
            w: add_param(reg, format!("{name}.w"), &[in_dim, out_dim], init, rng)?,
            b: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(reg, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(reg, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(reg: &mut ParameterRegistry<S>, name: &str, dim: usize, rng: &mut R) -> Result<Self, TensorError> {
        Ok(LayerNorm {
            gamma: add_param(reg, format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: add_param(reg, format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(reg, self.gamma);
        let b = tape.param(reg, self.beta);
        tape.layer_norm(x, g, b, S::from_f64(LN_EPS))
    }
}

/// `z = f W + b` to `K` logits.
pub fn linear_head<S: Scalar>(tape: &mut Tape<S>, reg: &ParameterRegistry<S>, head: &Linear, features: Var) -> Result<Var, TensorError> {
    head.forward(tape, reg, features)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            hidden: 512,
            dropout: 0.1,
            num_classes: 2,
        }
    }
}

/// Concatenate → Linear → ReLU → dropout → Linear.
#[derive(Clone, Debug)]
pub struct HybridHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl HybridHead {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(reg: &mut ParameterRegistry<S>, name: &str, in_dim: usize, cfg: &HybridConfig, rng: &mut R) -> Result<Self, TensorError> {
        Ok(HybridHead {
            fc1: Linear::new(reg, &format!("{name}.fc1"), in_dim, cfg.hidden, Init::TruncNormal(0.02), rng)?,
            fc2: Linear::new(reg, &format!("{name}.fc2"), cfg.hidden, cfg.num_classes, Init::TruncNormal(0.02), rng)?,
            dropout: cfg.dropout,
        })
    }
}

/// Logits from backbone features `[B, D_i]`, concatenated in the order given.
pub fn hybrid_head<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    reg: &ParameterRegistry<S>,
    head: &HybridHead,
    features: &[Var],
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let f = if features.len() == 1 { features[0] } else { tape.concat(features, 1)? };
    let width = *tape.shape(f).last().unwrap_or(&0);
    if width != head.fc1.in_dim {
        return Err(TensorError::ShapeMismatch {
            op: "hybrid_head",
            lhs: tape.shape(f).to_vec(),
            rhs: vec![head.fc1.in_dim, head.fc1.out_dim],
        });
    }
    let h = head.fc1.forward(tape, reg, f)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, head.dropout, mode, rng);
    head.fc2.forward(tape, reg, h)
}

/// Model family selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Vit,
    Conv,
    /// ViT and conv features through the concat head.
    Hybrid2,
    /// ViT, conv and a second ViT with half the patch size.
    Hybrid3,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vit => "vit",
            ModelKind::Conv => "conv",
            ModelKind::Hybrid2 => "hybrid2",
            ModelKind::Hybrid3 => "hybrid3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vit" => Some(ModelKind::Vit),
            "conv" => Some(ModelKind::Conv),
            "hybrid2" => Some(ModelKind::Hybrid2),
            "hybrid3" => Some(ModelKind::Hybrid3),
            _ => None,
        }
    }

    /// ViT-bearing models get mixup and skip ImageNet normalization.
    pub fn transformer_path(self) -> bool {
        self != ModelKind::Conv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vit: ViTConfig,
    pub conv: ConvConfig,
    pub hybrid: HybridConfig,
}

impl ModelSpec {
    /// Desk-scale defaults at `image_size` (64 unless overridden).
    pub fn new(kind: ModelKind, image_size: usize) -> Self {
        ModelSpec {
            kind,
            vit: ViTConfig {
                image_size,
                ..ViTConfig::default()
            },
            conv: ConvConfig::default(),
            hybrid: HybridConfig::default(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.vit.image_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kind != ModelKind::Conv {
            self.vit.validate()?;
        }
        if self.kind != ModelKind::Vit {
            self.conv.validate(self.vit.image_size)?;
        }
        if self.kind == ModelKind::Hybrid3 {
            self.secondary_vit().validate()?;
        }
        if matches!(self.kind, ModelKind::Hybrid2 | ModelKind::Hybrid3) && (self.hybrid.hidden == 0 || !(0.0..1.0).contains(&self.hybrid.dropout)) {
            return Err(ModelError::InvalidConfig("hybrid head needs hidden > 0 and dropout in [0, 1)".into()));
        }
        Ok(())
    }

    fn secondary_vit(&self) -> ViTConfig {
        ViTConfig {
            patch_size: (self.vit.patch_size / 2).max(1),
            ..self.vit.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    ViT(ViT),
    Conv(ConvNet),
}

impl Backbone {
    pub fn prefix(&self) -> &str {
        match self {
            Backbone::ViT(v) => &v.prefix,
            Backbone::Conv(c) => &c.prefix,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::ViT(v) => v.config.embed_dim,
            Backbone::Conv(c) => c.feature_dim(),
        }
    }

    /// Prefixes of the last `n` blocks (encoder blocks or conv stages).
    pub fn last_blocks(&self, n: usize) -> Vec<String> {
        let (count, path) = match self {
            Backbone::ViT(v) => (v.blocks.len(), "blocks"),
            Backbone::Conv(c) => (c.stages.len(), "stages"),
        };
        (count.saturating_sub(n)..count).map(|i| format!("{}.{path}.{i}.", self.prefix())).collect()
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, images: Var) -> Result<Var, TensorError> {
        match self {
            Backbone::ViT(v) => v.forward(tape, reg, images),
            Backbone::Conv(c) => c.forward(tape, reg, images),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Linear(Linear),
    Hybrid(HybridHead),
}

pub const HEAD_PREFIX: &str = "head.";

/// A backbone set plus its classification head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub spec: ModelSpec,
    pub backbones: Vec<Backbone>,
    pub head: Head,
}

impl Classifier {
    /// Registers every parameter in `reg` and initialises it from `seed`.
    pub fn build<S: Scalar>(spec: &ModelSpec, reg: &mut ParameterRegistry<S>, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = stream(seed, Domain::Init, 0, 0);
        let mut backbones = Vec::new();
        match spec.kind {
            ModelKind::Vit => backbones.push(Backbone::ViT(ViT::new(reg, "vit0", &spec.vit, &mut rng)?)),
            ModelKind::Conv => backbones.push(Backbone::Conv(ConvNet::new(reg, "conv0", &spec.conv, &mut rng)?)),
            ModelKind::Hybrid2 | ModelKind::Hybrid3 => {
                backbones.push(Backbone::ViT(ViT::new(reg, "vit0", &spec.vit, &mut rng)?));
                backbones.push(Backbone::Conv(ConvNet::new(reg, "conv0", &spec.conv, &mut rng)?));
                if spec.kind == ModelKind::Hybrid3 {
                    backbones.push(Backbone::ViT(ViT::new(reg, "vit1", &spec.secondary_vit(), &mut rng)?));
                }
            }
        }
        let concat: usize = backbones.iter().map(Backbone::feature_dim).sum();
        let head = match spec.kind {
            ModelKind::Vit | ModelKind::Conv => Head::Linear(Linear::new(reg, "head", concat, spec.vit.num_classes, Init::TruncNormal(0.02), &mut rng)?),
            _ => {
                let cfg = HybridConfig {
                    num_classes: spec.vit.num_classes,
                    ..spec.hybrid.clone()
                };
                Head::Hybrid(HybridHead::new(reg, "head", concat, &cfg, &mut rng)?)
            }
        };
        Ok(Classifier {
            spec: spec.clone(),
            backbones,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.vit.num_classes
    }

    /// Logits `[B, K]` for images `[B, 3, H, W]`.
    pub fn forward<S: Scalar, R: Rng + ?Sized>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, images: Var, mode: Mode, rng: &mut R) -> Result<Var, TensorError> {
        let mut features = Vec::with_capacity(self.backbones.len());
        for b in &self.backbones {
            features.push(b.forward(tape, reg, images)?);
        }
        match &self.head {
            Head::Linear(l) => linear_head(tape, reg, l, features[0]),
            Head::Hybrid(h) => hybrid_head(tape, reg, h, &features, mode, rng),
        }
    }

    /// Freezes every backbone, leaving only the head trainable.
    pub fn freeze_backbones<S: Scalar>(&self, reg: &mut ParameterRegistry<S>) {
        for b in &self.backbones {
            reg.freeze_prefix(&format!("{}.", b.prefix()));
        }
    }

    /// Parameter-name prefixes released when the last `n` blocks of every
    /// backbone are unfrozen.
    pub fn unfreeze_targets(&self, n: usize) -> Vec<String> {
        self.backbones.iter().flat_map(|b| b.last_blocks(n)).collect()
    }
}

#[cfg(test)]
mod tests;
