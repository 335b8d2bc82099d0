//! Deterministic jet-image preprocessing.
//!
//! Four stages, in order: zero suppression, per-channel Z-score with global
//! training-set statistics, an upper clip at `clip_factor · σ_k`, and a
//! per-sample min-max rescale taken jointly over all channels. Each stage
//! evaluates in `f64` and stores `f32`.

use alloc::vec::Vec;

use thiserror::Error;

use crate::Image;

/// Largest `f32` strictly below 1.
pub const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocError {
    #[error("channel {channel} has zero spread over the training set")]
    DegenerateChannel { channel: usize },
    #[error("no training images were supplied")]
    Empty,
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("preprocessing constants must be strictly positive")]
    InvalidConfig,
}

/// Global per-channel mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
    pub n_pixels: u64,
}

impl ChannelStats {
    pub fn validate(&self) -> Result<(), PreprocError> {
        for (channel, s) in self.sigma.iter().enumerate() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(PreprocError::DegenerateChannel { channel });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocConfig {
    pub zero_threshold: f64,
    pub clip_factor: f64,
    pub eps: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            zero_threshold: 1e-3,
            clip_factor: 500.0,
            eps: 1e-5,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<(), PreprocError> {
        if self.zero_threshold > 0.0 && self.clip_factor > 0.0 && self.eps > 0.0 {
            Ok(())
        } else {
            Err(PreprocError::InvalidConfig)
        }
    }
}

/// Streaming per-channel moments. Each image contributes an exact two-pass
/// mean and sum of squared deviations; images are combined with the pairwise
/// update of Chan et al., so partial accumulators can be merged in any fixed
/// order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StatsAccumulator {
    count: [u64; 3],
    mean: [f64; 3],
    m2: [f64; 3],
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image after zero suppression at `threshold`.
    pub fn push(&mut self, image: &Image, threshold: f64) -> Result<(), PreprocError> {
        if image.channels != 3 {
            return Err(PreprocError::ChannelCount {
                expected: 3,
                got: image.channels,
            });
        }
        for c in 0..3 {
            let plane = image.plane(c);
            let suppressed = |v: f32| if (v as f64) < threshold { 0.0 } else { v as f64 };
            let n = plane.len() as u64;
            if n == 0 {
                continue;
            }
            let mean = plane.iter().map(|&v| suppressed(v)).sum::<f64>() / n as f64;
            let m2 = plane
                .iter()
                .map(|&v| {
                    let d = suppressed(v) - mean;
                    d * d
                })
                .sum::<f64>();
            self.merge_channel(c, n, mean, m2);
        }
        Ok(())
    }

    fn merge_channel(&mut self, c: usize, n: u64, mean: f64, m2: f64) {
        let na = self.count[c];
        if na == 0 {
            self.count[c] = n;
            self.mean[c] = mean;
            self.m2[c] = m2;
            return;
        }
        let total = na + n;
        let delta = mean - self.mean[c];
        self.mean[c] += delta * n as f64 / total as f64;
        self.m2[c] += m2 + delta * delta * (na as f64 * n as f64 / total as f64);
        self.count[c] = total;
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        for c in 0..3 {
            if other.count[c] > 0 {
                self.merge_channel(c, other.count[c], other.mean[c], other.m2[c]);
            }
        }
    }

    pub fn finish(&self) -> Result<ChannelStats, PreprocError> {
        if self.count[0] == 0 {
            return Err(PreprocError::Empty);
        }
        let mut sigma = [0.0; 3];
        for c in 0..3 {
            sigma[c] = num_traits::Float::sqrt(self.m2[c] / self.count[c] as f64);
        }
        let stats = ChannelStats {
            mu: self.mean,
            sigma,
            n_pixels: self.count[0],
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// Mean and population standard deviation of every zero-suppressed pixel,
/// per channel, over the training images.
pub fn compute_channel_stats<'a, I>(training: I, config: &PreprocConfig) -> Result<ChannelStats, PreprocError>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut acc = StatsAccumulator::new();
    for image in training {
        acc.push(image, config.zero_threshold)?;
    }
    acc.finish()
}

/// Pixels strictly below `threshold` become 0.
pub fn zero_suppress(image: &Image, threshold: f64) -> Image {
    let mut out = image.clone();
    for v in &mut out.data {
        if (*v as f64) < threshold {
            *v = 0.0;
        }
    }
    out
}

/// `(x - μ_k) / σ_k` per channel.
pub fn zscore_normalize(image: &Image, stats: &ChannelStats) -> Image {
    let mut out = image.clone();
    for c in 0..out.channels.min(3) {
        let (mu, sigma) = (stats.mu[c], stats.sigma[c]);
        for v in out.plane_mut(c) {
            *v = ((*v as f64 - mu) / sigma) as f32;
        }
    }
    out
}

/// `min(x, clip_factor · σ_k)` per channel; no lower bound.
///
/// The cap is compared with the already standardized values.
pub fn clip_outliers(image: &Image, stats: &ChannelStats, clip_factor: f64) -> Image {
    let mut out = image.clone();
    for c in 0..out.channels.min(3) {
        let cap = clip_factor * stats.sigma[c];
        for v in out.plane_mut(c) {
            let x = *v as f64;
            if x > cap {
                *v = cap as f32;
            }
        }
    }
    out
}

/// `(x - min) / (max - min + eps)` with min and max taken over every channel
/// of the image. Results that would round up to 1 in `f32` are held at the
/// largest value below 1.
pub fn minmax_scale(image: &Image, eps: f64) -> Image {
    let mut out = image.clone();
    let (lo, hi) = image
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if image.data.is_empty() {
        return out;
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64 + eps);
    for v in &mut out.data {
        let y = ((*v as f64 - lo) / range) as f32;
        *v = if y >= 1.0 { BELOW_ONE } else { y };
    }
    out
}

/// The full chain for one window. `stats` must come from the training split.
pub fn preprocess_window(image: &Image, stats: &ChannelStats, config: &PreprocConfig) -> Result<Image, PreprocError> {
    stats.validate()?;
    config.validate()?;
    if image.channels != 3 {
        return Err(PreprocError::ChannelCount {
            expected: 3,
            got: image.channels,
        });
    }
    let x = zero_suppress(image, config.zero_threshold);
    let x = zscore_normalize(&x, stats);
    let x = clip_outliers(&x, stats, config.clip_factor);
    Ok(minmax_scale(&x, config.eps))
}

/// Preprocesses many windows with the same statistics.
pub fn preprocess_all<'a, I>(images: I, stats: &ChannelStats, config: &PreprocConfig) -> Result<Vec<Image>, PreprocError>
where
    I: IntoIterator<Item = &'a Image>,
{
    images.into_iter().map(|im| preprocess_window(im, stats, config)).collect()
}
