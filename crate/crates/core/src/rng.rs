//! Named random sub-streams derived from one master seed.
//!
//! Every stochastic component (mobility, SNR, demand, each agent, federation)
//! draws from its own ChaCha stream, so changing how often one component
//! samples never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// FNV-1a over the label bytes; used as the ChaCha stream id.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(master_seed: u64, label: &str) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(label_hash(label));
    rng
}
