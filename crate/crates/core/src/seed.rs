//! Stable seed derivation: a master seed fans out to component seeds by
//! hashing component names, so adding a component never shifts the streams
//! of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the component path `parts` under `master`.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = fnv1a(&master.to_le_bytes(), FNV_OFFSET);
    for p in parts {
        // length prefix keeps ["ab", "c"] distinct from ["a", "bc"]
        h = fnv1a(&(p.len() as u64).to_le_bytes(), h);
        h = fnv1a(p.as_bytes(), h);
    }
    splitmix64(h)
}

pub fn rng_for(master: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_distinct() {
        // Frozen so that config-cited seeds stay reproducible across releases.
        assert_eq!(derive_seed(1, &["link", "A-B"]), derive_seed(1, &["link", "A-B"]));
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
        assert_ne!(derive_seed(1, &["x"]), derive_seed(2, &["x"]));
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }
}
