//! Keyed random streams.
//!
//! Every random draw in the crate comes from a generator keyed by
//! `(seed, stream, counter)`, where the counter is usually a sample index.
//! Sample `j` of a pool therefore gets the same latent no matter how the pool
//! is split across workers, and nothing has to be carried between steps
//! except the seed itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Algorithm tag stored next to the RNG state in checkpoints.
pub const RNG_TAG: &str = "chacha8-keyed-v1";

/// Independent stream identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Pool = 3,
    Batch = 4,
    Eval = 5,
    Lemma = 6,
    Noise = 7,
}

/// Generator for one `(seed, stream, counter)` key.
pub fn keyed(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal vector of length `d` for key `(seed, stream, counter)`.
pub fn normal_vec(seed: u64, stream: Stream, counter: u64, d: usize) -> Vec<f64> {
    let mut rng = keyed(seed, stream, counter);
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` latents of width `d` stacked row-major, counters `first..first+count`.
pub fn latents(seed: u64, stream: Stream, first: u64, count: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * d);
    for j in 0..count as u64 {
        out.extend(normal_vec(seed, stream, first + j, d).into_iter().map(|v| v as f32));
    }
    out
}

/// Opaque RNG state as stored in checkpoints: the seed, little-endian.
pub fn state_bytes(seed: u64) -> Vec<u8> {
    seed.to_le_bytes().to_vec()
}

pub fn seed_from_state(bytes: &[u8]) -> Option<u64> {
    Some(u64::from_le_bytes(bytes.try_into().ok()?))
}
