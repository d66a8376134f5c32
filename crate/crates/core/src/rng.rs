//! Seeded RNG streams.
//!
//! Every random decision in a run draws from a stream derived only from the
//! global seed and a fixed set of coordinates (purpose tag, node id, round),
//! so results never depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes. Values are part of the determinism contract; do not reorder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dataset = 2,
    Partition = 3,
    Topology = 4,
    Attack = 5,
    Train = 6,
    Gossip = 7,
    Keys = 8,
    Adversary = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with arbitrary coordinates into a new 64-bit seed.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(seed: u64, purpose: Stream, a: u64, b: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, &[purpose as u64, a, b]))
}

pub fn from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
