//! Seeded random streams.
//!
//! Every simulated path draws from its own ChaCha8 stream, keyed by the
//! dataset seed and selected by the path index. Path `p` therefore sees the
//! same numbers no matter how many paths are generated or how the work is
//! split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for one path of a dataset.
pub fn path_stream(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Generator for everything that is not a path: parameter sampling,
/// initialization, shuffling. `purpose` keeps the uses apart.
pub fn aux_stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Path streams use small indices; auxiliary streams live at the top.
    rng.set_stream(u64::MAX - purpose as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    ModelSampling = 0,
    Initialization = 1,
    Shuffling = 2,
}

/// SplitMix64 finalizer, used to derive per-task seeds from one experiment seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
