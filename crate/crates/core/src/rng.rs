//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! 64-bit seed and a 64-bit stream id built from a domain tag plus up to two
//! indices (event, epoch, sample, ...). Two streams with different keys never
//! share state, so work can be generated in any order or in parallel and still
//! reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep independent consumers of the same seed apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Event = 1,
    Shuffle = 2,
    Augment = 3,
    Mixup = 4,
    Dropout = 5,
    Init = 6,
    Split = 7,
    Bench = 8,
}

/// Stream for `(seed, domain, major, minor)`.
///
/// `major` occupies 24 bits and `minor` 32 bits of the stream id.
pub fn stream(seed: u64, domain: Domain, major: u64, minor: u64) -> StreamRng {
    debug_assert!(major < (1 << 24), "major index overflows stream id");
    debug_assert!(minor < (1 << 32), "minor index overflows stream id");
    let id = ((domain as u64) << 56) | ((major & 0xff_ffff) << 32) | (minor & 0xffff_ffff);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Deterministic Fisher-Yates shuffle.
pub fn shuffle<T, R: rand::Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
