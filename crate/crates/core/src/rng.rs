//! Named, reproducible random streams.
//!
//! All randomness in the pipeline descends from a single root seed. A stream
//! is identified by `(root, label, index)`; two streams with different labels
//! or indices are statistically independent, and the same triple always
//! yields the same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a 64-bit sub-seed for `(root, label, index)`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(label)) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(root: u64, label: &str, index: u64) -> Stream {
    Stream::seed_from_u64(derive_seed(root, label, index))
}

pub fn from_seed(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}
