//! Little-endian binary formats for window datasets (`JQG1`) and parameter
//! checkpoints (`JQGC`).
//!
//! Dataset layout: magic, version u16, sample count u32, height u8,
//! width u8, channels u8 (13 bytes), then per sample a label byte and the
//! channel-major f32 payload. Checkpoint layout: magic, version u16,
//! parameter count u32, then per parameter the name (u32 length + UTF-8),
//! rank u32, dims u32 each, and the f32 data.

use std::fs;
use std::io;
use std::path::Path;

use qgjet_core::tensor::{ParameterRegistry, Tensor};
use qgjet_core::train::Sample;
use qgjet_core::{Image, Label};
use thiserror::Error;

pub const DATASET_MAGIC: [u8; 4] = *b"JQG1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"JQGC";
pub const DATASET_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DATASET_HEADER_LEN: u64 = 13;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file is {actual} bytes, header implies {expected}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("file ends inside {0}")]
    Truncated(&'static str),
    #[error("{0} bytes after the last record")]
    TrailingBytes(usize),
    #[error("invalid label byte {0}")]
    BadLabel(u8),
    #[error("parameter name is not UTF-8")]
    BadName,
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("sample {index} has shape {got:?}, expected {expected:?}")]
    InconsistentShape { index: usize, expected: [usize; 3], got: [usize; 3] },
    #[error("dimension {0} does not fit the header field")]
    DimensionTooLarge(usize),
    #[error("checkpoint does not match the model: {0:?}")]
    ParameterMismatch(Vec<String>),
}

fn label_byte(l: Label) -> u8 {
    l.index() as u8
}

fn byte_label(b: u8) -> Result<Label, FormatError> {
    match b {
        0 => Ok(Label::Gluon),
        1 => Ok(Label::Quark),
        _ => Err(FormatError::BadLabel(b)),
    }
}

/// Serializes samples that all share one `[C, H, W]` shape.
pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>, FormatError> {
    let shape = samples.first().map_or([0, 0, 0], |s| s.image.shape());
    for (index, s) in samples.iter().enumerate() {
        if s.image.shape() != shape {
            return Err(FormatError::InconsistentShape { index, expected: shape, got: s.image.shape() });
        }
    }
    let [c, h, w] = shape;
    for d in shape {
        if d > u8::MAX as usize {
            return Err(FormatError::DimensionTooLarge(d));
        }
    }
    let n = u32::try_from(samples.len()).map_err(|_| FormatError::DimensionTooLarge(samples.len()))?;
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN as usize + samples.len() * (1 + 4 * c * h * w));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&[h as u8, w as u8, c as u8]);
    for s in samples {
        out.push(label_byte(s.label));
        for v in &s.image.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn check_magic(bytes: &[u8], expected: [u8; 4]) -> Result<(), FormatError> {
    let found: [u8; 4] = bytes.get(..4).ok_or(FormatError::Truncated("magic"))?.try_into().unwrap();
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    Ok(())
}

/// Validates magic, version and the size equation before touching payloads.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>, FormatError> {
    check_magic(bytes, DATASET_MAGIC)?;
    if bytes.len() < DATASET_HEADER_LEN as usize {
        return Err(FormatError::SizeMismatch { expected: DATASET_HEADER_LEN, actual: bytes.len() as u64 });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let (h, w, c) = (bytes[10] as usize, bytes[11] as usize, bytes[12] as usize);
    let record = 1 + 4 * c * h * w;
    let expected = DATASET_HEADER_LEN + n as u64 * record as u64;
    if bytes.len() as u64 != expected {
        return Err(FormatError::SizeMismatch { expected, actual: bytes.len() as u64 });
    }
    bytes[DATASET_HEADER_LEN as usize..]
        .chunks_exact(record)
        .map(|r| {
            let data = r[1..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Ok(Sample {
                label: byte_label(r[0])?,
                image: Image::from_vec(c, h, w, data).expect("record length matches shape"),
            })
        })
        .collect()
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_dataset(samples)?)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>, FormatError> {
    decode_dataset(&fs::read(path)?)
}

pub fn encode_checkpoint(reg: &ParameterRegistry<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for (_, p) in reg.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

/// Parameters in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterRegistry<f32>, FormatError> {
    check_magic(bytes, CHECKPOINT_MAGIC)?;
    let mut r = Reader { bytes, pos: 4 };
    let version = u16::from_le_bytes(r.take(2, "header")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("header")?;
    let mut reg = ParameterRegistry::new();
    for _ in 0..count {
        let len = r.u32("parameter name")?;
        let name = std::str::from_utf8(r.take(len, "parameter name")?).map_err(|_| FormatError::BadName)?;
        let rank = r.u32("parameter shape")?;
        let shape = (0..rank).map(|_| r.u32("parameter shape")).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(FormatError::Truncated("parameter data"))?;
        let raw = r.take(numel.checked_mul(4).ok_or(FormatError::Truncated("parameter data"))?, "parameter data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let value = Tensor::from_vec(&shape, data).expect("length matches shape");
        reg.add(name, value).map_err(|_| FormatError::DuplicateParameter(name.into()))?;
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(reg)
}

pub fn write_checkpoint(path: &Path, reg: &ParameterRegistry<f32>) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_checkpoint(reg))?)
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterRegistry<f32>, FormatError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Copies a checkpoint into a freshly built model; every model parameter
/// must be present with its shape, and nothing else may be.
pub fn restore(model_reg: &mut ParameterRegistry<f32>, ckpt: &ParameterRegistry<f32>) -> Result<(), FormatError> {
    let mut bad = model_reg.load_values(ckpt);
    bad.extend(ckpt.iter().filter(|(_, p)| model_reg.id(&p.name).is_none()).map(|(_, p)| p.name.clone()));
    if bad.is_empty() {
        Ok(())
    } else {
        Err(FormatError::ParameterMismatch(bad))
    }
}
