//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from one root seed plus a stream
//! label and a list of indices (epoch, member id, start index, ...). Derived
//! streams do not depend on scheduling, so parallel and serial execution
//! produce identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `root`, a stream label and a path of indices.
pub fn derive(root: u64, stream: &str, path: &[u64]) -> u64 {
    // FNV-1a over the label keeps the mapping stable across toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut s = splitmix64(root ^ h);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, stream: &str, path: &[u64]) -> Rng {
    rng(derive(root, stream, path))
}
