//! Seeded random streams. One master seed fans out into independent named
//! sub-streams so each pipeline stage can be replayed on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream names used by the pipeline.
pub mod streams {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const AUGMENT: &str = "augment";
    pub const SAMPLING: &str = "sampling";
    pub const NOISE: &str = "noise";
    pub const ROLLOUT: &str = "rollout";
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent generator for `(master_seed, name)`.
pub fn stream(master_seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Sub-stream indexed by an integer, e.g. one per demonstration.
pub fn indexed_stream(master_seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}
