//! Seed fan-out: one master seed feeds independent ChaCha streams per
//! purpose and index, so changing one factor of an experiment never
//! perturbs the random numbers of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    EnvNoise = 2,
    Exploration = 3,
    QFit = 4,
    SafeInit = 5,
    Oracle = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, stream, a, b)`.
pub fn derive(seed: u64, stream: Stream, a: u64, b: u64) -> Rng {
    let mut state = splitmix64(seed);
    state = splitmix64(state ^ (stream as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    state = splitmix64(state ^ a.wrapping_mul(0xA076_1D64_78BD_642F));
    state = splitmix64(state ^ b.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_mut(8).enumerate() {
        state = splitmix64(state.wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
