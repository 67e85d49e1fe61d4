//! Counter-based random streams.
//!
//! Every random draw in training and evaluation comes from a stream named by
//! a master seed plus a tuple of integer labels. The stream for a given label
//! tuple is the same no matter how work is split across threads or whether a
//! run was resumed from a checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Purpose tags mixed into stream labels so unrelated draws never collide.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const TASK: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const PROPOSAL: u64 = 5;
    pub const MCMC: u64 = 6;
    pub const REFERENCE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
    pub const SLICES: u64 = 9;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic 256-bit key from a seed and labels.
pub fn stream(seed: u64, labels: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed);
    for &l in labels {
        h = splitmix(h ^ splitmix(l.wrapping_add(0x1234_5678)));
    }
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        h = splitmix(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    StreamRng::from_seed(key)
}
