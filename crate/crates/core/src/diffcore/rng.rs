//! Counter-based seeding.
//!
//! Every random stream is keyed on the global seed plus a list of
//! counters (epoch, batch, sample, window, ...) and a purpose tag, so
//! any piece of the pipeline can be replayed on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Sampling = 3,
    Synth = 4,
    Fold = 5,
    Check = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: Purpose, counters: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(purpose as u64));
    for &c in counters {
        h = splitmix(h ^ splitmix(c.wrapping_add(0x2545_F491_4F6C_DD1D)));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, counters))
}
