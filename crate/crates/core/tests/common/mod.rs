//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use bfpksort::bfp::{BfpBlock, BfpFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tries every exponent of the format, smallest first, and keeps the first
/// one whose rounded maximum fits.
pub fn oracle_block(values: &[f64], f: &BfpFormat) -> BfpBlock {
    let limit = f64::from((1i32 << (f.mantissa_bits() - 1)) - 1);
    let lo = -(1i32 << (f.exponent_bits() - 1));
    let hi = (1i32 << (f.exponent_bits() - 1)) - 1;
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut mantissas = vec![0; f.block_size()];
    if max_abs == 0.0 {
        return BfpBlock {
            exponent: lo,
            mantissas,
        };
    }
    let exponent = (lo..=hi)
        .find(|&e| (max_abs / 2f64.powi(e)).round_ties_even() <= limit)
        .expect("value within format range");
    for (m, v) in mantissas.iter_mut().zip(values) {
        *m = (v / 2f64.powi(exponent)).round_ties_even() as i32;
    }
    BfpBlock {
        exponent,
        mantissas,
    }
}

/// Plain left-to-right float dot product.
pub fn float_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Standard normal entries times `scale`.
pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Uniform random permutation of `0..n` by Fisher-Yates.
pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}
