//! Deterministic random streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream whose seed is a
//! SplitMix64 hash of `(master seed, role, ids...)`. Client `i`'s minibatch
//! stream for round `t`, local step `k` is keyed on `(seed, i, t, k)` only,
//! so two protocol variants run from the same seed see the same samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// Purpose of a stream. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Data = 1,
    Topology = 2,
    Partition = 3,
    Init = 4,
    Base = 5,
    Minibatch = 6,
    Selection = 7,
    Perturb = 8,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, role: StreamRole, ids: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6A09_E667_F3BC_C908);
    h = splitmix64(h ^ role as u64);
    for &id in ids {
        h = splitmix64(h ^ id);
    }
    h
}

pub fn stream(master: u64, role: StreamRole, ids: &[u64]) -> RngStream {
    RngStream::seed_from_u64(derive_seed(master, role, ids))
}

/// Stream for client `client`'s minibatch at round `round`, local step `step`.
pub fn minibatch_stream(master: u64, client: usize, round: usize, step: usize) -> RngStream {
    stream(
        master,
        StreamRole::Minibatch,
        &[client as u64, round as u64, step as u64],
    )
}
