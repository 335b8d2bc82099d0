//! Quark/gluon jet-image classification toolkit.
//!
//! Everything in this crate is a pure function of its inputs and runs without
//! `std`: detector-hit binning and jet-window extraction, the synthetic jet
//! generator, the deterministic preprocessing chain, training-time
//! augmentation, a small reverse-mode autodiff tape, the toy ViT / conv /
//! hybrid classifiers, and the training protocol with its metric suite.
//!
//! File formats, wall clocks and the command line live in the `qgjet` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod detector;
pub mod image;
pub mod models;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use image::Image;
pub use scalar::Scalar;

/// Jet class. Discriminants follow the on-disk label byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Gluon = 0,
    Quark = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Gluon, Label::Quark];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Label> {
        match i {
            0 => Some(Label::Gluon),
            1 => Some(Label::Quark),
            _ => None,
        }
    }
}
