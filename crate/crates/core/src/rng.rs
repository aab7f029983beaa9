//! Keyed deterministic RNG streams.
//!
//! Every stochastic component derives its own stream from the master seed
//! plus a tag path (round, client id, purpose). Streams are independent of
//! scheduling, so sequential and concurrent execution produce identical
//! results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha stream from a master seed and a tag path.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = mix(master ^ 0x5353_4545_4446_4544);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    let mut seed = [0u8; 32];
    let mut z = state;
    for chunk in seed.chunks_mut(8) {
        z = mix(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}
