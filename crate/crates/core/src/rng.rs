//! Seeded, splittable random streams.
//!
//! Every random consumer draws from a ChaCha8 keystream selected by a master
//! seed and a label path. ChaCha is counter based, so the same `(seed, path)`
//! yields the same numbers on every platform and independently of how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Domain labels for derived streams.
pub mod label {
    pub const SOURCE: u64 = 0x5352_4345;
    pub const POLARIZATION: u64 = 0x504f_4c41;
    pub const LINK: u64 = 0x4c49_4e4b;
    pub const DETECT: u64 = 0x4445_5443;
    pub const DARK: u64 = 0x4441_524b;
    pub const CLOCK_WALK: u64 = 0x434c_4b57;
    pub const CLOCK_PPS: u64 = 0x434c_4b50;
    pub const ACQUISITION: u64 = 0x4143_5131;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a label path into a child seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

/// A generator for `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(derive_seed(seed, path));
    rng
}
