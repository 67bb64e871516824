//! Deterministic seed streams derived from one root seed.

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of the named stream under `root`. Different stream
/// names give unrelated sequences.
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(root);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(1, "env", 0), derive_seed(1, "bank", 0));
        assert_ne!(derive_seed(1, "env", 0), derive_seed(1, "env", 1));
        assert_ne!(derive_seed(1, "env", 0), derive_seed(2, "env", 0));
        assert_eq!(derive_seed(7, "env", 3), derive_seed(7, "env", 3));
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference generator seeded with 0
        let mut s = 0u64;
        let mut next = || {
            let out = splitmix64(s);
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            out
        };
        assert_eq!(next(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(next(), 0x6e78_9e6a_a1b9_65f4);
    }
}
