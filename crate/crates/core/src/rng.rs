//! Seed derivation for reproducible, scheduling-independent runs.
//!
//! Rule: an experiment with master seed `m` and tag `t` has key
//! `k = splitmix64(m ^ fnv1a64(t))`; path `i` draws from a xoshiro256++
//! generator seeded (via its SplitMix64 expansion) with
//! `splitmix64(k ^ splitmix64(i))`. Path `i`'s randomness therefore depends
//! only on `(m, t, i)`, never on which worker ran it or in what order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SimRng = Xoshiro256PlusPlus;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Key shared by all streams of one experiment.
pub fn derive_key(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(tag))
}

/// Generator for path `index` of the experiment keyed by `key`.
pub fn stream(key: u64, index: u64) -> SimRng {
    Xoshiro256PlusPlus::seed_from_u64(splitmix64(key ^ splitmix64(index)))
}

/// Shorthand for `stream(derive_key(master, tag), index)`.
pub fn path_rng(master: u64, tag: &str, index: u64) -> SimRng {
    stream(derive_key(master, tag), index)
}
