//! Deterministic seed derivation for parallel simulation streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! derived from a master seed plus a structural label, so results do not
//! depend on scheduling or evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; stable across platforms and versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A point in a reproducible seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream(splitmix64(master))
    }

    /// Child stream for a named subsystem.
    pub fn child(&self, label: &str) -> Self {
        SeedStream(splitmix64(self.0 ^ fnv1a(label.as_bytes())))
    }

    /// Child stream for an indexed unit of work (bootstrap round, trial, ...).
    pub fn index(&self, i: u64) -> Self {
        SeedStream(splitmix64(self.0.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(i | 1)) ^ splitmix64(i))
    }

    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.0)
    }

    pub fn raw(&self) -> u64 {
        self.0
    }
}
