//! Seed plumbing: every subsystem derives its own stream from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a namespaced sub-seed (FNV-1a over the namespace, mixed with splitmix64).
pub fn sub_seed(seed: u64, namespace: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in namespace.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, namespace: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, namespace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn namespaces_differ() {
        assert_ne!(sub_seed(7, "init"), sub_seed(7, "data"));
        assert_eq!(sub_seed(7, "init"), sub_seed(7, "init"));
        assert_ne!(sub_seed(7, "init"), sub_seed(8, "init"));
    }
}
