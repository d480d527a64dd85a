//! Named deterministic random streams.
//!
//! Every source of randomness in the crate is a [`stream`] derived from an
//! explicit 64-bit base seed and a label naming its purpose
//! (`"init.stem.conv.weight"`, `"shuffle.fold2.epoch7"`, ...). Streams with
//! different labels are statistically independent, and the same
//! `(seed, label)` always yields the same sequence, on every platform.
//! ChaCha in counter mode is the generator, so a stream can also be consumed
//! in parallel chunks by deriving one sub-stream per work item.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed and a label into a single derived 64-bit seed.
///
/// Used both for RNG streams and for deriving per-item seeds
/// (e.g. one seed per generated series).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut state = seed ^ fnv1a(label.as_bytes());
    splitmix64(&mut state)
}

/// A named random stream: deterministic in `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(label.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
