//! Deterministic derivation of independent RNG streams from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags keep streams for different uses apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Init = 3,
    Selection = 4,
    Malicious = 5,
    LocalTrain = 6,
    Attack = 7,
    ParamSample = 8,
    Aggregator = 9,
    Eval = 10,
}

/// Seed for `(master, stream, round, client)`.
pub fn derive(master: u64, stream: Stream, round: u64, client: u64) -> u64 {
    let mut h = mix64(master);
    h = mix64(h ^ (stream as u64));
    h = mix64(h ^ round);
    mix64(h ^ client)
}

pub fn rng(master: u64, stream: Stream, round: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, round, client))
}
