//! Named random streams split off one root seed.
//!
//! Each subsystem (population, policy, data, training) draws from its own
//! stream so that changing one does not perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const POPULATION: &str = "population";
pub const POLICY: &str = "policy";
pub const DATA: &str = "data";
pub const TRAINING: &str = "training";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` and a stream name (FNV-1a over the name).
pub fn stream(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

/// Derive a child seed from `root` and an index (round, client, k, ...).
pub fn substream(root: u64, index: u64) -> u64 {
    splitmix64(root.wrapping_add(splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ_by_name_and_root() {
        assert_ne!(stream(1, POLICY), stream(1, DATA));
        assert_ne!(stream(1, POLICY), stream(2, POLICY));
        assert_eq!(stream(7, TRAINING), stream(7, TRAINING));
        assert_ne!(substream(3, 0), substream(3, 1));
    }
}
