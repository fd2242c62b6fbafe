//! Deterministic random streams derived from one master seed.
//!
//! Every consumer of randomness gets its own ChaCha stream addressed by a
//! label and counters. Streams are independent of each other and of the
//! order in which they are created, which is what makes whole runs
//! reproducible bit for bit: the n-th draw of a given stream is a pure
//! function of (master seed, label, counters, n).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, stable across platforms.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a over the label bytes, then one mixing round.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

/// Derives a child seed from a master seed, a purpose label, and counters.
pub fn derive_seed(master: u64, label: &str, counters: &[u64]) -> u64 {
    let mut acc = mix64(master ^ hash_label(label));
    for (i, &c) in counters.iter().enumerate() {
        acc = mix64(acc ^ c.wrapping_add(0x1000_0000_0000_000d_u64.wrapping_mul(i as u64 + 1)));
    }
    acc
}

/// A fresh ChaCha stream for (master, label, counters).
pub fn stream(master: u64, label: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, "batch", &[3, 1]);
        let mut b = stream(7, "batch", &[3, 1]);
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn streams_differ_by_label_and_counter() {
        let mut a = stream(7, "batch", &[0]);
        let mut b = stream(7, "probe", &[0]);
        let mut c = stream(7, "batch", &[1]);
        let x: u64 = a.gen();
        assert_ne!(x, b.gen());
        let mut a2 = stream(7, "batch", &[0]);
        let _: u64 = a2.gen();
        assert_ne!(x, c.gen());
    }

    #[test]
    fn derive_seed_ignores_nothing() {
        // Different masters must decorrelate even with equal labels/counters.
        assert_ne!(derive_seed(1, "x", &[0]), derive_seed(2, "x", &[0]));
        assert_ne!(derive_seed(1, "x", &[]), derive_seed(1, "x", &[0]));
    }
}
