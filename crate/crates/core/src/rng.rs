//! Seeded randomness helpers. All stochastic operations take a
//! `&mut Rng` so runs replay exactly from a seed.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent child stream, used to give every request or record its own
/// source.
pub fn fork(rng: &mut Rng) -> Rng {
    Rng::seed_from_u64(rng.random())
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[inline]
pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniform integer in `lo..=hi`.
#[inline]
pub fn int_in(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Exponential draw with the given mean; mean 0 returns 0.
pub fn exponential(rng: &mut Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Exp::new(1.0 / mean).map(|d| d.sample(rng)).unwrap_or(0.0)
}

pub fn normal_tensor<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::of(normal(rng) * std))
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> alloc::vec::Vec<usize> {
    let mut p: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
