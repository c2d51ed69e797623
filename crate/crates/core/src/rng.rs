//! Seeded random sources. Every stochastic choice in the crate is drawn from a
//! [`ChaCha8Rng`] derived from an explicit seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{normalize_rows, Mat, EPS_NORM};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream label (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    m.as_mut_slice().iter_mut().for_each(|v| *v = std * gaussian(rng));
    m
}

pub fn uniform_mat(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    m.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    m
}

/// Rows drawn uniformly from the unit sphere.
pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    loop {
        let mut m = gaussian_mat(rng, rows, cols, 1.0);
        if normalize_rows(&mut m, EPS_NORM).is_ok() {
            return m;
        }
    }
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> alloc::vec::Vec<usize> {
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
