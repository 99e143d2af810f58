//! Expansion of the single top-level seed into per-component seeds.

/// 64-bit FNV-1a hash; stable across platforms and toolchains.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a salt into an independent child seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Child seed for a named component.
pub fn component_seed(seed: u64, component: &str) -> u64 {
    derive_seed(seed, fnv1a(component))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn components_differ() {
        assert_ne!(component_seed(7, "backend"), component_seed(7, "balance"));
        assert_ne!(component_seed(7, "backend"), component_seed(8, "backend"));
        assert_eq!(component_seed(7, "backend"), component_seed(7, "backend"));
    }
}
