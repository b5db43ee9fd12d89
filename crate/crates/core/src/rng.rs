//! Seed splitting.
//!
//! Every random consumer gets its own ChaCha stream derived from a master
//! seed and a path of labels, so results never depend on the order in which
//! parallel workers touch the generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a label path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &label in path {
        state ^= label.wrapping_mul(0xD6E8_FEB8_6659_FD93).wrapping_add(out);
        out = splitmix64(&mut state);
    }
    out
}

/// Builds an independent generator for the given label path.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = derive_seed(seed, path);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable labels for the purposes that draw from a stream.
pub mod label {
    pub const STRUCTURE: u64 = 1;
    pub const PARAMS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const GRADIENT: u64 = 4;
    pub const ELBO: u64 = 5;
    pub const MU: u64 = 6;
    pub const REPLICATE: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[1, 3]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn path_order_matters() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    }
}
