//! Discrete-event simulator of a fading wireless multicast downlink, together
//! with the learning algorithms that drive it: a surrogate-model gradient
//! descent over queueing strategies (DSGD), a constrained deep Q-network with
//! a learned Lagrange multiplier (AC-DQN), and their three-timescale
//! combination (IDA).
//!
//! The crate is organised around the simulator core ([`model`], [`queue`],
//! [`sim`]), a small dense-network stack ([`nn`], [`rl`]), the learners
//! ([`dsgd`], [`acdqn`], [`ida`]), reference policies and exact oracles for
//! verification ([`baselines`]), and the experiment catalog ([`scenario`]).

pub mod acdqn;
pub mod baselines;
pub mod dsgd;
pub mod ida;
pub mod model;
pub mod nn;
pub mod queue;
pub mod rl;
pub mod scenario;
pub mod sim;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent, reproducible RNG sub-stream from a master seed and
/// a fixed label. Components seeded through different labels (arrivals,
/// channels, exploration, ...) consume their streams without disturbing one
/// another, so a single component stays bit-reproducible even when the code
/// around it changes how often it draws.
pub fn substream(master_seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a over the label, then SplitMix64 expansion; both are fixed
    // algorithms, so seeds are stable across platforms and compiler versions.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = master_seed ^ h;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
