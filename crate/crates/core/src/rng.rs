//! Seeded randomness.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! 64-bit value. Independent streams (per sweep run, per fuzz trial, per
//! benchmark split) are derived with [`scramble`], so results never depend
//! on scheduling order.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

/// SplitMix64 finalizer applied to `base ^ golden * (index + 1)`.
pub fn scramble(base: u64, index: u64) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Stream `index` derived from `base`.
pub fn derived(base: u64, index: u64) -> Prng {
    seeded(scramble(base, index))
}

/// Uniform draw on the open interval (0, 1).
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

/// Standard exponential variate, `-ln u`.
pub fn standard_exponential<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -open_uniform(rng).ln()
}

/// Standard normal variate by the Box-Muller transform. Consumes two
/// uniforms per call and discards the paired sine variate.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = open_uniform(rng);
    let u2 = open_uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scramble_separates_indices() {
        let a = scramble(42, 0);
        let b = scramble(42, 1);
        assert_ne!(a, b);
        assert_eq!(a, scramble(42, 0));
        assert_ne!(scramble(0, 0), 0);
    }

    #[test]
    fn normal_moments() {
        let mut rng = seeded(3);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn exponential_mean() {
        let mut rng = seeded(5);
        let n = 200_000;
        let mean = (0..n).map(|_| standard_exponential(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01);
    }
}
