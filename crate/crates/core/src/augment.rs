//! Training-time augmentation and the deterministic validation path.
//!
//! Training images are quantized to 8 bits once, then every geometric and
//! photometric stage works on `f32` intensity levels in `[0, 255]` held in a
//! channel-major [`Image`]. Values are divided by 255 at the end, so with all
//! random parameters pinned to identity the train transform differs from the
//! validation transform only by the single quantization step.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::{Euclid, Float};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::preprocess::{preprocess_window, ChannelStats, PreprocConfig, PreprocError};
use crate::tensor::{Tensor, TensorError};
use crate::Image;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Luminance weights used for contrast and saturation.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(&'static str),
    #[error("batch shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error(transparent)]
    Preprocess(#[from] PreprocError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub out_size: usize,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub jitter_bcs: f64,
    pub jitter_hue: f64,
    pub mixup_alpha: f64,
    /// ImageNet standardization; on for the conv path only.
    pub imagenet_normalize: bool,
    pub color_jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.8, 1.0),
            crop_ratio: (0.75, 1.33),
            out_size: 224,
            flip_prob: 0.5,
            max_rotation_deg: 20.0,
            jitter_bcs: 0.2,
            jitter_hue: 0.1,
            mixup_alpha: 0.2,
            imagenet_normalize: false,
            color_jitter: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(AugmentError::InvalidConfig("crop_scale must satisfy 0 < lo <= hi <= 1"));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(AugmentError::InvalidConfig("crop_ratio must satisfy 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(AugmentError::InvalidConfig("flip_prob must lie in [0, 1]"));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(AugmentError::InvalidConfig("mixup_alpha must be positive"));
        }
        if self.out_size == 0 {
            return Err(AugmentError::InvalidConfig("out_size must be positive"));
        }
        if !(self.max_rotation_deg >= 0.0 && self.jitter_bcs >= 0.0 && self.jitter_bcs < 1.0 && self.jitter_hue >= 0.0 && self.jitter_hue <= 0.5) {
            return Err(AugmentError::InvalidConfig("jitter and rotation ranges out of bounds"));
        }
        Ok(())
    }
}

/// Interleaved 8-bit image, `data[(y * width + x) * 3 + c]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Uint8Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Uint8Image {
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (r - x).abs() == 0.5 {
        2.0 * (x / 2.0).round()
    } else {
        r
    }
}

/// `round(v · 255)` with ties to even, clamped to `[0, 255]`.
pub fn to_uint8(image: &Image) -> Uint8Image {
    assert_eq!(image.channels, 3, "to_uint8 expects three channels");
    let (h, w) = (image.height, image.width);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = round_half_even(image.get(c, y, x) as f64 * 255.0);
                data.push(if v.is_nan() { 0 } else { v.clamp(0.0, 255.0) as u8 });
            }
        }
    }
    Uint8Image { height: h, width: w, data }
}

/// Intensity levels in `[0, 255]`, channel-major.
pub fn to_levels(image: &Uint8Image) -> Image {
    let mut out = Image::zeros(3, image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.set(c, y, x, image.get(y, x, c) as f32);
            }
        }
    }
    out
}

/// `v / 255`, channel-major.
pub fn to_float(image: &Uint8Image) -> Image {
    levels_to_unit(to_levels(image))
}

fn levels_to_unit(mut levels: Image) -> Image {
    levels.data.iter_mut().for_each(|v| *v /= 255.0);
    levels
}

pub fn imagenet_normalize(image: &mut Image) {
    for c in 0..3 {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        image.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

pub fn imagenet_denormalize(image: &mut Image) {
    for c in 0..3 {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        image.plane_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
    }
}

/// Integer crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn full(height: usize, width: usize) -> Self {
        CropRect {
            top: 0,
            left: 0,
            height,
            width,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Area fraction from `scale`, log-uniform aspect from `ratio`, ten attempts,
/// then a center crop clamped to the ratio bounds.
pub fn sample_crop_rect<R: Rng + ?Sized>(height: usize, width: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut R) -> CropRect {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if 0 < w && w <= width && 0 < h && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropRect {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < ratio.0 {
        ((width as f64 / ratio.0).round() as usize, width)
    } else if in_ratio > ratio.1 {
        (height, (height as f64 * ratio.1).round() as usize)
    } else {
        (height, width)
    };
    CropRect {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

/// Source coordinate, lower tap and weight for half-pixel bilinear resampling
/// along one axis, clamped to the crop.
fn axis_taps(out: usize, len: usize, offset: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (offset + i0, offset + i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `rect` to `out_h × out_w` with half-pixel centers and
/// edge clamping.
pub fn resized_crop(image: &Image, rect: CropRect, out_h: usize, out_w: usize) -> Image {
    let ys = axis_taps(out_h, rect.height, rect.top);
    let xs = axis_taps(out_w, rect.width, rect.left);
    let mut out = Image::zeros(image.channels, out_h, out_w);
    for c in 0..image.channels {
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let p00 = image.get(c, y0, x0) as f64;
                let p01 = image.get(c, y0, x1) as f64;
                let p10 = image.get(c, y1, x0) as f64;
                let p11 = image.get(c, y1, x1) as f64;
                let top = (1.0 - wx) * p00 + wx * p01;
                let bottom = (1.0 - wx) * p10 + wx * p11;
                out.set(c, oy, ox, ((1.0 - wy) * top + wy * bottom) as f32);
            }
        }
    }
    out
}

pub fn resize(image: &Image, out_size: usize) -> Image {
    resized_crop(image, CropRect::full(image.height, image.width), out_size, out_size)
}

pub fn random_resized_crop<R: Rng + ?Sized>(image: &Image, config: &AugmentConfig, rng: &mut R) -> Image {
    let rect = sample_crop_rect(image.height, image.width, config.crop_scale, config.crop_ratio, rng);
    resized_crop(image, rect, config.out_size, config.out_size)
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..image.height {
            let row = (c * image.height + y) * image.width;
            out.data[row..row + image.width].reverse();
        }
    }
    out
}

pub fn random_hflip<R: Rng + ?Sized>(image: &Image, p: f64, rng: &mut R) -> Image {
    if rng.random::<f64>() < p {
        hflip(image)
    } else {
        image.clone()
    }
}

/// Rotates about the image center by `degrees` (counter-clockwise in display
/// orientation) with bilinear sampling; taps outside the frame read 0.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    let (h, w) = (image.height, image.width);
    let theta = degrees * PI / 180.0;
    let (sin, cos) = (theta.sin(), theta.cos());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let tap = |c: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            image.get(c, y as usize, x as usize) as f64
        }
    };
    let mut out = Image::zeros(image.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (wx, wy) = (sx - fx, sy - fy);
            let (x0, y0) = (fx as i64, fy as i64);
            for c in 0..image.channels {
                let top = (1.0 - wx) * tap(c, y0, x0) + wx * tap(c, y0, x0 + 1);
                let bottom = (1.0 - wx) * tap(c, y0 + 1, x0) + wx * tap(c, y0 + 1, x0 + 1);
                out.set(c, y, x, ((1.0 - wy) * top + wy * bottom) as f32);
            }
        }
    }
    out
}

pub fn random_rotate<R: Rng + ?Sized>(image: &Image, max_deg: f64, rng: &mut R) -> Image {
    rotate(image, uniform(rng, -max_deg, max_deg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterStage {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// One draw of color-jitter factors and stage order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift in turns.
    pub hue: f64,
    pub order: [JitterStage; 4],
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        order: [JitterStage::Brightness, JitterStage::Contrast, JitterStage::Saturation, JitterStage::Hue],
    };

    pub fn sample<R: Rng + ?Sized>(bcs: f64, hue: f64, rng: &mut R) -> Self {
        let mut factor = || uniform(rng, 1.0 - bcs, 1.0 + bcs);
        let (brightness, contrast, saturation) = (factor(), factor(), factor());
        let hue = uniform(rng, -hue, hue);
        let mut order = Self::IDENTITY.order;
        crate::rng::shuffle(&mut order, rng);
        JitterParams {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        }
    }
}

fn clamp_levels(v: f64) -> f32 {
    v.clamp(0.0, 255.0) as f32
}

fn adjust_brightness(image: &mut Image, f: f64) {
    image.data.iter_mut().for_each(|v| *v = clamp_levels(*v as f64 * f));
}

fn gray(image: &Image, i: usize) -> f64 {
    let n = image.height * image.width;
    LUMA[0] * image.data[i] as f64 + LUMA[1] * image.data[n + i] as f64 + LUMA[2] * image.data[2 * n + i] as f64
}

fn adjust_contrast(image: &mut Image, f: f64) {
    let n = image.height * image.width;
    if n == 0 {
        return;
    }
    let mean = (0..n).map(|i| gray(image, i)).sum::<f64>() / n as f64;
    image.data.iter_mut().for_each(|v| *v = clamp_levels(f * *v as f64 + (1.0 - f) * mean));
}

fn adjust_saturation(image: &mut Image, f: f64) {
    let n = image.height * image.width;
    for i in 0..n {
        let g = gray(image, i);
        for c in 0..3 {
            let v = &mut image.data[c * n + i];
            *v = clamp_levels(f * *v as f64 + (1.0 - f) * g);
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return (0.0, 0.0, max);
    }
    let s = delta / max;
    let h = if max == r {
        Euclid::rem_euclid(&((g - b) / delta), &6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (v, v, v);
    }
    let h6 = (h - h.floor()) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(image: &mut Image, shift: f64) {
    let n = image.height * image.width;
    for i in 0..n {
        let (r, g, b) = (image.data[i] as f64, image.data[n + i] as f64, image.data[2 * n + i] as f64);
        if r == g && g == b {
            continue;
        }
        let (h, s, v) = rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        image.data[i] = clamp_levels(r * 255.0);
        image.data[n + i] = clamp_levels(g * 255.0);
        image.data[2 * n + i] = clamp_levels(b * 255.0);
    }
}

/// Applies the jitter stages in `params.order` to a three-channel image in
/// `[0, 255]` levels.
pub fn apply_jitter(image: &Image, params: &JitterParams) -> Image {
    let mut out = image.clone();
    for stage in params.order {
        match stage {
            JitterStage::Brightness => adjust_brightness(&mut out, params.brightness),
            JitterStage::Contrast => adjust_contrast(&mut out, params.contrast),
            JitterStage::Saturation => adjust_saturation(&mut out, params.saturation),
            JitterStage::Hue => adjust_hue(&mut out, params.hue),
        }
    }
    out
}

pub fn color_jitter<R: Rng + ?Sized>(image: &Image, config: &AugmentConfig, rng: &mut R) -> Image {
    apply_jitter(image, &JitterParams::sample(config.jitter_bcs, config.jitter_hue, rng))
}

/// Every random choice of one train-transform call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainParams {
    pub crop: CropRect,
    pub flip: bool,
    pub rotation_deg: f64,
    pub jitter: Option<JitterParams>,
}

impl TrainParams {
    pub fn identity(height: usize, width: usize) -> Self {
        TrainParams {
            crop: CropRect::full(height, width),
            flip: false,
            rotation_deg: 0.0,
            jitter: Some(JitterParams::IDENTITY),
        }
    }

    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, config: &AugmentConfig, rng: &mut R) -> Self {
        let crop = sample_crop_rect(height, width, config.crop_scale, config.crop_ratio, rng);
        let flip = rng.random::<f64>() < config.flip_prob;
        let rotation_deg = uniform(rng, -config.max_rotation_deg, config.max_rotation_deg);
        let jitter = config
            .color_jitter
            .then(|| JitterParams::sample(config.jitter_bcs, config.jitter_hue, rng));
        TrainParams {
            crop,
            flip,
            rotation_deg,
            jitter,
        }
    }
}

/// Quantize, crop-resize, flip, rotate, jitter, rescale to `[0, 1]`, and
/// optionally standardize, using fixed parameters.
pub fn apply_train_params(preprocessed: &Image, params: &TrainParams, config: &AugmentConfig) -> Image {
    let levels = to_levels(&to_uint8(preprocessed));
    let mut x = resized_crop(&levels, params.crop, config.out_size, config.out_size);
    if params.flip {
        x = hflip(&x);
    }
    if params.rotation_deg != 0.0 {
        x = rotate(&x, params.rotation_deg);
    }
    if let Some(j) = &params.jitter {
        x = apply_jitter(&x, j);
    }
    let mut x = levels_to_unit(x);
    if config.imagenet_normalize {
        imagenet_normalize(&mut x);
    }
    x
}

/// The stochastic training transform for one preprocessed window.
pub fn train_transform<R: Rng + ?Sized>(preprocessed: &Image, config: &AugmentConfig, rng: &mut R) -> Image {
    let params = TrainParams::sample(preprocessed.height, preprocessed.width, config, rng);
    apply_train_params(preprocessed, &params, config)
}

/// Resize of an already preprocessed window, with optional standardization.
pub fn validation_resize(preprocessed: &Image, out_size: usize, imagenet: bool) -> Image {
    let mut x = resize(preprocessed, out_size);
    if imagenet {
        imagenet_normalize(&mut x);
    }
    x
}

/// Preprocessing followed by the deterministic resize.
pub fn validation_transform(window: &Image, stats: &ChannelStats, preproc: &PreprocConfig, out_size: usize, imagenet: bool) -> Result<Image, AugmentError> {
    Ok(validation_resize(&preprocess_window(window, stats, preproc)?, out_size, imagenet))
}

/// Mixing coefficient `λ ~ Beta(α, α)`.
pub fn sample_mixup_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f32, AugmentError> {
    let beta = Beta::new(alpha, alpha).map_err(|_| AugmentError::InvalidConfig("mixup_alpha must be positive"))?;
    Ok(beta.sample(rng) as f32)
}

/// `λ·a + (1−λ)·b` for images and targets. The last target column is set to
/// one minus the others so each row stays exactly on the simplex for `K = 2`.
pub fn mix_batches(
    (images_a, targets_a): (&Tensor<f32>, &Tensor<f32>),
    (images_b, targets_b): (&Tensor<f32>, &Tensor<f32>),
    lambda: f32,
) -> Result<(Tensor<f32>, Tensor<f32>), AugmentError> {
    for (a, b) in [(images_a, images_b), (targets_a, targets_b)] {
        if a.shape() != b.shape() {
            return Err(AugmentError::ShapeMismatch {
                a: a.shape().to_vec(),
                b: b.shape().to_vec(),
            });
        }
    }
    if targets_a.rank() != 2 || targets_a.shape()[0] != images_a.shape().first().copied().unwrap_or(0) {
        return Err(AugmentError::ShapeMismatch {
            a: images_a.shape().to_vec(),
            b: targets_a.shape().to_vec(),
        });
    }
    let mu = 1.0 - lambda;
    let blend = |a: &[f32], b: &[f32]| -> Vec<f32> { a.iter().zip(b).map(|(&x, &y)| lambda * x + mu * y).collect() };
    let images = Tensor::from_vec(images_a.shape(), blend(images_a.data(), images_b.data()))?;
    let k = targets_a.shape()[1];
    let mut targets = blend(targets_a.data(), targets_b.data());
    if k > 0 {
        for row in targets.chunks_mut(k) {
            let head: f32 = row[..k - 1].iter().sum();
            row[k - 1] = 1.0 - head;
        }
    }
    let targets = Tensor::from_vec(targets_a.shape(), targets)?;
    Ok((images, targets))
}

/// Draws `λ` and mixes the two batches.
pub fn mixup<R: Rng + ?Sized>(
    batch_a: (&Tensor<f32>, &Tensor<f32>),
    batch_b: (&Tensor<f32>, &Tensor<f32>),
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>, f32), AugmentError> {
    let lambda = sample_mixup_lambda(alpha, rng)?;
    let (images, targets) = mix_batches(batch_a, batch_b, lambda)?;
    Ok((images, targets, lambda))
}
