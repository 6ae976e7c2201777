//! Deterministic random streams derived from one master seed.
//!
//! Every stochastic component (splitting, mask draws, concrete-relaxation
//! noise, triplet sampling, initialization) pulls from its own named stream.
//! Streams are independent of each other, so adding or removing one consumer
//! never shifts the draws seen by the rest; that property is what makes the
//! ablation variants bit-comparable against stripped-down training loops.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives the sub-seed for `(label, index)` under `master`.
///
/// FNV-1a over the label, mixed with the master seed and the index through a
/// splitmix64 finalizer. Stable across platforms and releases by construction.
pub fn substream_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h ^ splitmix64(index)))
}

/// A deterministic generator for the named stream.
pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, label, index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
