//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed mixed from a parent seed and a stream index, so
//! episodes, scenes and minibatch shuffles never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used when deriving child seeds from an episode seed.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const POLICY: u64 = 2;
    pub const MODE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const INIT: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with an index into an independent child seed.
pub fn derive(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0xA5A5_A5A5)))
}

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_streams_are_distinct() {
        let a = derive(7, 0);
        let b = derive(7, 1);
        let c = derive(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(derive(7, 0), a);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut r1 = from_seed(42);
        let mut r2 = from_seed(42);
        for _ in 0..16 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
