//! Seeded random streams.
//!
//! Every chain owns one seed. Each parameter block draws from its own ChaCha
//! stream derived from that seed, so changing how many variates one block
//! consumes never shifts the variates seen by another block.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type ChainRng = ChaCha20Rng;

/// Named substreams of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Beta1 = 1,
    Delta = 2,
    Alpha = 3,
    Sigma2 = 4,
    Gamma = 5,
    D = 6,
    VDelta = 7,
    Init = 8,
    Data = 9,
    Split = 10,
}

pub fn stream(seed: u64, which: Stream) -> ChainRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Mixes a base seed with an index; used for replications and reduced runs.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-block generators for one chain.
#[derive(Debug, Clone)]
pub struct BlockRngs {
    pub beta1: ChainRng,
    pub delta: ChainRng,
    pub alpha: ChainRng,
    pub sigma2: ChainRng,
    pub gamma: ChainRng,
    pub d: ChainRng,
    pub v_delta: ChainRng,
}

impl BlockRngs {
    pub fn new(seed: u64) -> Self {
        BlockRngs {
            beta1: stream(seed, Stream::Beta1),
            delta: stream(seed, Stream::Delta),
            alpha: stream(seed, Stream::Alpha),
            sigma2: stream(seed, Stream::Sigma2),
            gamma: stream(seed, Stream::Gamma),
            d: stream(seed, Stream::D),
            v_delta: stream(seed, Stream::VDelta),
        }
    }

    /// Word positions of every stream; recorded with retained draws.
    pub fn positions(&self) -> [u128; 7] {
        [
            self.beta1.get_word_pos(),
            self.delta.get_word_pos(),
            self.alpha.get_word_pos(),
            self.sigma2.get_word_pos(),
            self.gamma.get_word_pos(),
            self.d.get_word_pos(),
            self.v_delta.get_word_pos(),
        ]
    }
}
