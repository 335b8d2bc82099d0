use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use super::{add_param, Init, LayerNorm, Linear, ModelError};
use crate::tensor::{ParamId, ParameterRegistry, Tape, TensorError, Var};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 2,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.num_classes < 2 || self.in_channels == 0 {
            return Err(ModelError::InvalidConfig("mlp_ratio, num_classes and in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Number of patches `N`.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Sequence length `N + 1` including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Multi-head self-attention with separate Q, K, V and output projections.
/// The key projection has no bias: it would add a per-query constant to every
/// score and cancel in the softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(reg: &mut ParameterRegistry<S>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self, TensorError> {
        let init = Init::TruncNormal(0.02);
        Ok(Attention {
            q: Linear::new(reg, &format!("{name}.q"), dim, dim, init, rng)?,
            k: Linear::without_bias(reg, &format!("{name}.k"), dim, dim, init, rng)?,
            v: Linear::new(reg, &format!("{name}.v"), dim, dim, init, rng)?,
            o: Linear::new(reg, &format!("{name}.o"), dim, dim, init, rng)?,
            heads,
        })
    }

    /// `[B, S, D]` → `[B·h, S, D/h]`.
    fn split_heads<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let x = tape.reshape(x, &[b, n, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.heads, n, dh])
    }

    /// Output `[B, S, D]` and the attention weights `[B·h, S, S]`.
    pub fn forward_with_weights<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, x: Var) -> Result<(Var, Var), TensorError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.q.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "mhsa",
                lhs: s,
                rhs: alloc::vec![self.q.in_dim],
            });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, reg, x)?;
        let k = self.k.forward(tape, reg, x)?;
        let v = self.v.forward(tape, reg, x)?;
        let (q, k, v) = (self.split_heads(tape, q)?, self.split_heads(tape, k)?, self.split_heads(tape, v)?);
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax(scores);
        let ctx = tape.batch_matmul(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        Ok((self.o.forward(tape, reg, ctx)?, attn))
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, x: Var) -> Result<Var, TensorError> {
        Ok(self.forward_with_weights(tape, reg, x)?.0)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    fn new<S: Scalar, R: Rng + ?Sized>(reg: &mut ParameterRegistry<S>, name: &str, cfg: &ViTConfig, rng: &mut R) -> Result<Self, TensorError> {
        let d = cfg.embed_dim;
        let init = Init::TruncNormal(0.02);
        Ok(EncoderBlock {
            ln1: LayerNorm::new(reg, &format!("{name}.ln1"), d, rng)?,
            attn: Attention::new(reg, &format!("{name}.attn"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(reg, &format!("{name}.ln2"), d, rng)?,
            fc1: Linear::new(reg, &format!("{name}.mlp.fc1"), d, d * cfg.mlp_ratio, init, rng)?,
            fc2: Linear::new(reg, &format!("{name}.mlp.fc2"), d * cfg.mlp_ratio, d, init, rng)?,
        })
    }

    /// `y' = MHSA(LN(y)) + y`, `out = MLP(LN(y')) + y'`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, y: Var) -> Result<Var, TensorError> {
        let h = self.ln1.forward(tape, reg, y)?;
        let h = self.attn.forward(tape, reg, h)?;
        let y1 = tape.add(h, y)?;
        let h = self.ln2.forward(tape, reg, y1)?;
        let h = self.fc1.forward(tape, reg, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, reg, h)?;
        tape.add(h, y1)
    }
}

#[derive(Clone, Debug)]
pub struct ViT {
    pub prefix: String,
    pub config: ViTConfig,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl ViT {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(reg: &mut ParameterRegistry<S>, prefix: &str, cfg: &ViTConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch = Linear::new(reg, &format!("{prefix}.patch"), cfg.patch_dim(), d, Init::TruncNormal(0.02), rng)?;
        let cls = add_param(reg, format!("{prefix}.cls"), &[1, d], Init::Zeros, rng)?;
        let pos = add_param(reg, format!("{prefix}.pos"), &[cfg.seq_len(), d], Init::TruncNormal(0.02), rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(reg, &format!("{prefix}.blocks.{i}"), cfg, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let norm = LayerNorm::new(reg, &format!("{prefix}.norm"), d, rng)?;
        Ok(ViT {
            prefix: prefix.into(),
            config: cfg.clone(),
            patch,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    /// `[B, C, H, W]` → `[B, N + 1, D]`: projected patches after a prepended
    /// class token, plus the positional table.
    pub fn patch_embed<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, images: Var) -> Result<Var, TensorError> {
        let s = tape.shape(images).to_vec();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(TensorError::ShapeMismatch {
                op: "patch_embed",
                lhs: s,
                rhs: alloc::vec![cfg.in_channels, cfg.image_size, cfg.image_size],
            });
        }
        let patches = tape.patchify(images, cfg.patch_size)?;
        let tokens = self.patch.forward(tape, reg, patches)?;
        let cls = tape.param(reg, self.cls);
        let cls = tape.broadcast(cls, s[0]);
        let seq = tape.concat(&[cls, tokens], 1)?;
        let pos = tape.param(reg, self.pos);
        tape.add(seq, pos)
    }

    /// Final-normed class-token feature `[B, D]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, reg: &ParameterRegistry<S>, images: Var) -> Result<Var, TensorError> {
        let mut x = self.patch_embed(tape, reg, images)?;
        for block in &self.blocks {
            x = block.forward(tape, reg, x)?;
        }
        let x = self.norm.forward(tape, reg, x)?;
        tape.select(x, 1, 0)
    }
}
