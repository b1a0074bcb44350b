//! Finite probability distributions and logits.
//!
//! Everything here is `f64`. Distributions keep full support: entries below
//! [`EPSILON_FLOOR`] are raised to it and the vector renormalized, so every
//! KL divergence between two [`ProbVector`]s is finite.

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::rng;

/// Smallest probability a [`ProbVector`] may hold.
pub const EPSILON_FLOOR: f64 = 1e-12;

/// Accepted deviation of an input distribution's sum from one before it is
/// rejected outright (it is renormalized either way).
const SUM_TOLERANCE: f64 = 1e-9;

/// Point in the interior of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

/// Pre-softmax scores; every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

fn check_vocab(len: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::InvalidInput(format!(
            "vocabulary size must be at least 2, got {len}"
        )));
    }
    Ok(())
}

impl ProbVector {
    /// Validates a distribution: finite, nonnegative, sums to one within
    /// `1e-9`. Entries under the floor are raised and the result renormalized.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_vocab(values.len())?;
        if values.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Self::from_weights(values)
    }

    /// Normalizes nonnegative weights onto the simplex.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        check_vocab(weights.len())?;
        if weights.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::DegenerateDistribution(format!(
                "weights sum to {sum}"
            )));
        }
        if sum != 1.0 {
            weights.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(Self::floored(weights))
    }

    /// Builds a distribution from log-probabilities (or any log-weights).
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        check_vocab(log_weights.len())?;
        if log_weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite log-weight".into()));
        }
        let lse = logsumexp(log_weights);
        Ok(Self::floored(
            log_weights.iter().map(|l| (l - lse).exp()).collect(),
        ))
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        check_vocab(vocab)?;
        Ok(Self(vec![1.0 / vocab as f64; vocab]))
    }

    // Input must already sum to one. Floored entries sit exactly at the floor;
    // the remaining entries are rescaled to absorb the added mass.
    fn floored(mut values: Vec<f64>) -> Self {
        let low = values.iter().filter(|&&x| x < EPSILON_FLOOR).count();
        if low > 0 {
            let rest: f64 = values.iter().filter(|&&x| x >= EPSILON_FLOOR).sum();
            let scale = (1.0 - low as f64 * EPSILON_FLOOR) / rest;
            for x in values.iter_mut() {
                *x = if *x < EPSILON_FLOOR {
                    EPSILON_FLOOR
                } else {
                    (*x * scale).max(EPSILON_FLOOR)
                };
            }
        }
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ln(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.ln()).collect()
    }

    /// Index of the largest entry, ties toward the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn l1_distance(&self, other: &ProbVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn max_abs_diff(&self, other: &ProbVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_vocab(values.len())?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// First index attaining the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `ln Σ exp(x_i)` with the maximum factored out.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &LogitVector) -> ProbVector {
    let lse = logsumexp(&z.0);
    ProbVector::floored(z.0.iter().map(|x| (x - lse).exp()).collect())
}

pub fn log_softmax(z: &LogitVector) -> Vec<f64> {
    let lse = logsumexp(&z.0);
    z.0.iter().map(|x| x - lse).collect()
}


/// `KL(p ‖ q)` in nats.
pub fn kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_len(p.len(), q.len())?;
    let sum: f64 = p
        .0
        .iter()
        .zip(&q.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum();
    Ok(sum.max(0.0))
}

/// `KL(q ‖ softmax(z))` computed from log-softmax, no flooring of the model
/// side.
pub fn kl_to_logits(q: &ProbVector, z: &LogitVector) -> Result<f64> {
    check_len(q.len(), z.len())?;
    let log_p = log_softmax(z);
    let sum: f64 = q
        .0
        .iter()
        .zip(&log_p)
        .map(|(&qi, &lp)| qi * (qi.ln() - lp))
        .sum();
    Ok(sum.max(0.0))
}

pub(crate) fn check_unit_interval(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::InvalidCoefficient {
            name,
            value,
            reason: "must lie in [0, 1]",
        })
    }
}

/// `(1 − α)·p + α·s`.
pub fn mix(p: &ProbVector, s: &ProbVector, alpha: f64) -> Result<ProbVector> {
    check_unit_interval("alpha", alpha)?;
    check_len(p.len(), s.len())?;
    Ok(ProbVector(
        p.0.iter()
            .zip(&s.0)
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect(),
    ))
}

/// Uniform draw from the simplex: normalized standard exponentials.
pub fn random_simplex_point<R: Rng + ?Sized>(rng: &mut R, vocab: usize) -> Result<ProbVector> {
    check_vocab(vocab)?;
    let weights: Vec<f64> = (0..vocab).map(|_| rng::standard_exponential(rng)).collect();
    ProbVector::from_weights(weights)
}

/// Random logits with i.i.d. normal entries of the given scale.
pub fn random_logits<R: Rng + ?Sized>(rng: &mut R, vocab: usize, scale: f64) -> Result<LogitVector> {
    LogitVector::new((0..vocab).map(|_| scale * rng::standard_normal(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        close(softmax(&lv(&[0.0, 0.0])).values(), &[0.5, 0.5], 1e-15);
        for c in [-700.0, -3.5, 0.0, 12.0, 700.0] {
            close(softmax(&lv(&[c; 4])).values(), &[0.25; 4], 1e-15);
        }
        close(softmax(&lv(&[3f64.ln(), 0.0])).values(), &[0.75, 0.25], 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(LogitVector::new(vec![f64::NAN, 0.0]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let l2 = 2f64.ln();
        close(&log_softmax(&lv(&[0.0, 0.0])), &[-l2, -l2], 1e-15);
        close(
            &log_softmax(&lv(&[3f64.ln(), 0.0])),
            &[0.75f64.ln(), 0.25f64.ln()],
            1e-15,
        );
        let l3 = 3f64.ln();
        close(&log_softmax(&lv(&[5.0; 3])), &[-l3; 3], 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[0.3, 0.2, 0.5]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let k = kl(&pv(&[0.9, 0.1]), &pv(&[0.5, 0.5])).unwrap();
        assert!((k - 0.368065).abs() < 1e-6, "{k}");
        let k = kl(&pv(&[0.7, 0.3]), &pv(&[0.5, 0.5])).unwrap();
        assert!((k - 0.082283).abs() < 1e-6, "{k}");
    }

    #[test]
    fn kl_shape_error() {
        let err = kl(&pv(&[0.5, 0.5]), &pv(&[0.2, 0.3, 0.5])).unwrap_err();
        assert_eq!(err, Error::ShapeError { expected: 2, got: 3 });
    }

    #[test]
    fn kl_to_logits_matches_kl() {
        let q = pv(&[0.2, 0.5, 0.3]);
        let z = lv(&[0.4, -1.0, 2.0]);
        let a = kl_to_logits(&q, &z).unwrap();
        let b = kl(&q, &softmax(&z)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn mix_examples() {
        let p = pv(&[0.5, 0.5]);
        let s = pv(&[0.9, 0.1]);
        assert_eq!(mix(&p, &s, 0.0).unwrap(), p);
        assert_eq!(mix(&p, &s, 1.0).unwrap(), s);
        close(mix(&p, &s, 0.5).unwrap().values(), &[0.7, 0.3], 1e-15);
        for bad in [-0.1, 1.1, f64::NAN] {
            assert!(matches!(
                mix(&p, &s, bad),
                Err(Error::InvalidCoefficient { .. })
            ));
        }
    }

    #[test]
    fn floor_restores_support() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert!(p.values()[1] >= EPSILON_FLOOR);
        assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let far = softmax(&lv(&[0.0, -800.0]));
        assert_eq!(far.values()[1], EPSILON_FLOOR);
    }

    #[test]
    fn new_rejects_bad_sums() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(matches!(
            ProbVector::from_weights(vec![0.0, 0.0]),
            Err(Error::DegenerateDistribution(_))
        ));
    }

    #[test]
    fn random_point_structure() {
        let mut r = rng::seeded(1);
        let p = random_simplex_point(&mut r, 2).unwrap();
        assert!(p.values().iter().all(|&x| x > 0.0 && x < 1.0));
        assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut r = rng::seeded(9);
        let p = random_simplex_point(&mut r, 64).unwrap();
        assert_eq!(p.len(), 64);
        assert!(p.values().iter().all(|&x| x >= EPSILON_FLOOR));
    }

    #[test]
    fn random_point_mean_is_centroid() {
        let mut r = rng::seeded(2024);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let p = random_simplex_point(&mut r, 3).unwrap();
            for (a, x) in acc.iter_mut().zip(p.values()) {
                *a += x;
            }
        }
        for a in acc {
            assert!((a / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
