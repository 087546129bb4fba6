//! Labeled, counter-based RNG substreams.
//!
//! Every random draw in the workbench comes from a ChaCha stream derived
//! from (master seed, label, indices). Enabling or disabling one sampling
//! axis never shifts another axis' stream, and noise for (trajectory, step)
//! is reproducible under parallel rollout.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 finalizer
    h ^= v;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}

fn label_hash(label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV offset
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream keyed by (master, label).
pub fn substream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master, label_hash(label)))
}

/// Stream keyed by (master, label, index), e.g. one per meta-draw.
pub fn substream_indexed(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(master, label_hash(label)), index))
}

/// Noise stream keyed by (master, trajectory, step).
pub fn noise_stream(master: u64, trajectory: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(master, label_hash("noise")), trajectory), step))
}
