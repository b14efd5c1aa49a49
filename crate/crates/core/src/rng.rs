//! Named, position-addressed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! a hash of the root seed, a stream name and a list of indices (region, tile,
//! step, sample...). Streams are therefore independent of evaluation order,
//! which is what lets per-tile and per-sample work run on a thread pool and
//! still reproduce the sequential result bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod streams {
    pub const DATA: &str = "data";
    pub const MODEL_INIT: &str = "model-init";
    pub const ROUTING_NOISE: &str = "routing-noise";
    pub const KMEANS: &str = "kmeans";
    pub const SAMPLER: &str = "sampler";
    pub const CLASSIFIER_INIT: &str = "classifier-init";
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministically combine a root seed, a stream name and indices into a
/// 64-bit stream seed.
pub fn derive_seed(root: u64, stream: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    // Separator so ("ab", [1]) and ("a", [b'b', 1]) cannot collide.
    h = splitmix64(h ^ 0xFF);
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream(root: u64, name: &str, indices: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, indices))
}
