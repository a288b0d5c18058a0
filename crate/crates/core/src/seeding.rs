//! Independent, reproducible random streams.
//!
//! Every consumer of randomness gets its own generator derived from the
//! experiment seed and a tuple of identifiers, so adding draws to one stream
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dataset = 2,
    Partition = 3,
    Selection = 4,
    Split = 5,
    Shuffle = 6,
    Sampling = 7,
    Dropout = 8,
    Centralized = 9,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, ids: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &id in ids {
        h = splitmix64(h ^ splitmix64(id.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, ids: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, ids))
}
