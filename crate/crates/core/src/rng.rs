//! Deterministic per-(node, slot) random substreams.
//!
//! Every coin flip in a protocol run draws from a substream derived from
//! `(seed, node id, slot index, salt)`. Substreams are independent of each
//! other and of anything drawn earlier in the run, so skipping idle slots or
//! adding instrumentation never perturbs later draws, and an identical seed
//! reproduces a run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Salt values keeping distinct decision points in distinct substreams.
pub mod salt {
    pub const ROLE: u64 = 0x01;
    pub const ACK: u64 = 0x02;
    pub const SCHED: u64 = 0x03;
    pub const SAMPLE: u64 = 0x04;
    pub const CAP_FWD: u64 = 0x05;
    pub const CAP_REV: u64 = 0x06;
}

#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream, for nested runs (capacity iterations, retries).
    pub fn derive(&self, label: u64) -> RngStream {
        RngStream {
            seed: mix3(self.seed, 0x9e3779b97f4a7c15, label),
        }
    }

    /// Full generator for the given (node, slot, salt) coordinate.
    pub fn substream(&self, node: u64, slot: u64, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix3(self.seed ^ salt.wrapping_mul(0xd1342543de82ef95), node, slot))
    }

    /// Uniform draw in [0, 1) from the substream.
    pub fn coin(&self, node: u64, slot: u64, salt: u64) -> f64 {
        self.substream(node, slot, salt).random::<f64>()
    }
}

/// SplitMix64-style avalanche over three words.
fn mix3(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a;
    z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = z.wrapping_add(c.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
