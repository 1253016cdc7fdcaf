//! Seed derivation.
//!
//! Every random draw in a run comes from one 64-bit root seed. Each consumer
//! gets its own ChaCha8 stream keyed by that root: the stream id names the
//! consumer, so adding draws to one consumer never shifts another.
//!
//! | stream            | consumer                          |
//! |-------------------|-----------------------------------|
//! | `DATA`            | synthetic dataset generation      |
//! | `INIT`            | parameter initialization          |
//! | `SHUFFLE_BASE + e`| batch order of epoch `e`          |

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DATA: u64 = 1;
pub const INIT: u64 = 2;
pub const SHUFFLE_BASE: u64 = 1 << 32;

pub fn stream(root: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng
}

/// Shuffle seed for one epoch of one training run.
pub fn epoch_shuffle_seed(root: u64, epoch: usize) -> u64 {
    stream(root, SHUFFLE_BASE + epoch as u64).next_u64()
}
