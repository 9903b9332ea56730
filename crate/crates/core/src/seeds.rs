//! Keyed seed derivation.
//!
//! One master seed fans out to independent named ChaCha streams, so changing
//! how many draws one phase makes never shifts the randomness of another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data = 1,
    Init = 2,
    BatchOrder = 3,
    Noise = 4,
    Eval = 5,
    Split = 6,
    Simulation = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        SeedTree { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn rng(&self, stream: Stream) -> Rng {
        let mut rng = Rng::seed_from_u64(self.master);
        rng.set_stream(stream as u64);
        rng
    }

    /// Seed number `index` of a stream, e.g. one per evaluation repeat.
    pub fn seed(&self, stream: Stream, index: u64) -> u64 {
        let mut rng = self.rng(stream);
        rng.set_word_pos(u128::from(index) * 2);
        rng.next_u64()
    }

    /// Independent subtree (its own full set of streams).
    pub fn child(&self, stream: Stream, index: u64) -> SeedTree {
        SeedTree::new(self.seed(stream, index))
    }
}
