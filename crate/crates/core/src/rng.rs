//! Deterministic random streams.
//!
//! Every stochastic stage derives its own named stream from the run seed, so
//! stages can be reordered, re-run, or skipped without shifting the draws of
//! any other stage. A stream is identified by (seed, domain, index); the
//! domain is a short path-like label such as "corpus/train" or
//! "pretrain/member0", and the index separates repetitions inside one domain
//! (epochs, samples).
//!
//! The domain hash is FNV-1a rather than the stdlib hasher: `DefaultHasher`
//! is randomized per process, which would break run-to-run determinism.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives the stream for (seed, domain, index).
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let d = fnv1a(domain.as_bytes());
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ d.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
