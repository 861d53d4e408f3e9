//! Deterministic named RNG substreams.
//!
//! Every source of randomness in a run (per-layer init, shuffling, synthetic
//! data) draws from its own stream derived from the single experiment seed
//! plus a stable name, so adding a consumer never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stream name; stable across platforms and versions.
pub fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for the substream `name` of the experiment `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(name));
    rng
}
