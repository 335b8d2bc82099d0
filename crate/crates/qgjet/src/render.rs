//! Average per-pixel intensity maps written as binary PGM.

use std::fs;
use std::path::Path;

use qgjet_core::detector::Channel;
use qgjet_core::train::Sample;
use qgjet_core::Label;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no windows with the requested label")]
    EmptySelection,
    #[error("channel {0} is out of range")]
    BadChannel(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

impl Scale {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Scale::Linear),
            "log" => Some(Scale::Log),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Per-pixel mean over windows of `label`, in f64.
pub fn mean_map(samples: &[Sample], label: Label, channel: Channel) -> Result<(usize, usize, Vec<f64>), RenderError> {
    let selected: Vec<&Sample> = samples.iter().filter(|s| s.label == label).collect();
    let first = selected.first().ok_or(RenderError::EmptySelection)?;
    let (c, h, w) = (channel.index(), first.image.height, first.image.width);
    if c >= first.image.channels {
        return Err(RenderError::BadChannel(c));
    }
    let mut sum = vec![0.0f64; h * w];
    for s in &selected {
        for (acc, &v) in sum.iter_mut().zip(&s.image.data[c * h * w..(c + 1) * h * w]) {
            *acc += v as f64;
        }
    }
    let n = selected.len() as f64;
    Ok((h, w, sum.into_iter().map(|v| v / n).collect()))
}

/// Mean map, optional `log10(v + 1e-6)`, then affine stretch to 0–255.
/// A constant map renders as all zeros.
pub fn render_intensity_map(samples: &[Sample], label: Label, channel: Channel, scale: Scale) -> Result<GrayImage, RenderError> {
    let (height, width, mut map) = mean_map(samples, label, channel)?;
    if scale == Scale::Log {
        map.iter_mut().for_each(|v| *v = (*v + 1e-6).log10());
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = map
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok(GrayImage { width, height, pixels })
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<(), RenderError> {
    Ok(fs::write(path, image.to_pgm())?)
}
