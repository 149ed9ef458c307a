//! Named, counter-indexed random streams derived from one master seed.
//!
//! Each stream name hashes (with the master seed) to its own ChaCha key and
//! the index selects the ChaCha stream, so episode `i` draws the same numbers
//! whether episodes run serially, in parallel, or after a resume, and
//! changing how one stream is consumed never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Scenario sampling (operating condition, disturbance, market).
pub const SCENARIO: &str = "scenario";
/// Network weight initialisation.
pub const POLICY_INIT: &str = "policy-init";
/// Exploration noise of the stochastic policy.
pub const POLICY_SAMPLING: &str = "policy-sampling";

/// Key for stream `name` under `master`.
pub fn stream_key(master: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"ltvs-stream-v1");
    h.update(master.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

/// Generator for item `index` of stream `name`.
pub fn stream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(stream_key(master, name));
    rng.set_stream(index);
    rng
}
