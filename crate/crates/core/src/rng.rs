//! Seeding helpers. Every random draw in the crate flows from a `u64` seed
//! through ChaCha8, so runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::mat::Mat;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sub-seed for an independent stream: splitmix64 of `seed ^ stream`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = (seed ^ stream).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed keyed by two indices, e.g. (depth, sample).
pub fn derive2(seed: u64, a: u64, b: u64) -> u64 {
    derive(derive(seed, a), b)
}

/// Matrix of i.i.d. `N(0, std²)` entries.
pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Matrix of i.i.d. `U(lo, hi)` entries.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Mat::from_vec(rows, cols, data)
}
