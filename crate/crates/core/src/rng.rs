//! Seeded random streams. Every consumer derives its own stream from a root
//! seed and a path of integers, so parallel work never shares generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(root, path...)`.
pub fn stream(root: u64, path: &[u64]) -> Stream {
    let id = path
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(id);
    rng
}

/// Stream-id constants that keep different consumers apart.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const TRAIN_EPISODES: u64 = 2;
    pub const VAL_EPISODES: u64 = 3;
    pub const TEST_EPISODES: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const TASK_POOL: u64 = 6;
    pub const NODE: u64 = 7;
}
