//! Named random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream, keyed by
//! a base seed, a tag and an index. Streams never share state, so the order
//! in which clients or layers are processed cannot change what they draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(fnv1a(tag) ^ splitmix(index)));
    rng
}

/// Seeds that are not tied to the data scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBundle {
    /// Parameter initialization (shared by every client).
    pub init: u64,
    /// Per-client minibatch shuffling.
    pub shuffle: u64,
}

impl SeedBundle {
    pub fn from_base(seed: u64) -> Self {
        Self {
            init: seed,
            shuffle: seed,
        }
    }
}

impl Default for SeedBundle {
    fn default() -> Self {
        Self::from_base(0)
    }
}
