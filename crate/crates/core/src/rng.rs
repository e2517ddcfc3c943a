//! Seeded input generation.
//!
//! All random inputs come from SplitMix64, a 64-bit splittable generator:
//! a base seed is split into independent streams by [`substream`], so each
//! (head, operand) pair gets its own reproducible sequence.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::tensor::{Matrix, Real};

/// Derives an independent seed for stream `index` of `seed`.
pub fn substream(seed: u64, index: u64) -> u64 {
    let mut rng = SplitMix64::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.gen()
}

/// Uniform entries in `[-1, 1)`.
pub fn random_matrix<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-1.0..1.0)))
        .expect("uniform samples are finite")
}
