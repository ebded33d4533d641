//! Finite probability vectors, exact KL divergence and the single-sample
//! KL estimator `ψ(r) = r - ln r - 1`.
//!
//! All logarithms are natural, so divergences are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `Σ p = 1` for a valid [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Default floor for strictly-positive distributions.
pub const DEFAULT_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbError {
    #[error("empty weight vector")]
    Empty,
    #[error("negative weight {value} at index {index}")]
    Negative { index: usize, value: f64 },
    #[error("non-finite weight at index {index}")]
    NonFinite { index: usize },
    #[error("weights have zero total mass")]
    ZeroMass,
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("entry {value} at index {index} is below the positivity floor {floor}")]
    BelowFloor { index: usize, value: f64, floor: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("divergence is infinite: p[{index}] > 0 but q[{index}] = 0")]
    InfiniteDivergence { index: usize },
    #[error("ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
}

/// A probability vector over a finite alphabet.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates an already-normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, ProbError> {
        check_weights(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ProbError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self, ProbError> {
        check_weights(weights)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(ProbError::ZeroMass);
        }
        Ok(Self { probs: weights.iter().map(|w| w / total).collect() })
    }

    pub fn uniform(len: usize) -> Result<Self, ProbError> {
        if len == 0 {
            return Err(ProbError::Empty);
        }
        Ok(Self { probs: vec![1.0 / len as f64; len] })
    }

    pub fn point_mass(len: usize, index: usize) -> Result<Self, ProbError> {
        if len == 0 {
            return Err(ProbError::Empty);
        }
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    /// Checks every entry against `floor`.
    pub fn require_positive(&self, floor: f64) -> Result<(), ProbError> {
        match self.probs.iter().position(|&p| p < floor) {
            Some(index) => Err(ProbError::BelowFloor { index, value: self.probs[index], floor }),
            None => Ok(()),
        }
    }

    pub fn is_positive(&self, floor: f64) -> bool {
        self.require_positive(floor).is_ok()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Total-variation distance `½ Σ |p_i - q_i|`.
    pub fn total_variation(&self, other: &Distribution) -> Result<f64, ProbError> {
        same_len(self.len(), other.len())?;
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(deserializer)?;
        Distribution::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Per-token utility values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UtilityVector {
    utils: Vec<f64>,
}

impl UtilityVector {
    pub fn new(utils: Vec<f64>) -> Result<Self, ProbError> {
        if let Some(index) = utils.iter().position(|u| !u.is_finite()) {
            return Err(ProbError::NonFinite { index });
        }
        Ok(Self { utils })
    }

    pub fn values(&self) -> &[f64] {
        &self.utils
    }

    pub fn len(&self) -> usize {
        self.utils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utils.is_empty()
    }
}

impl TryFrom<Vec<f64>> for UtilityVector {
    type Error = ProbError;

    fn try_from(utils: Vec<f64>) -> Result<Self, Self::Error> {
        UtilityVector::new(utils)
    }
}

impl From<UtilityVector> for Vec<f64> {
    fn from(u: UtilityVector) -> Self {
        u.utils
    }
}

fn check_weights(weights: &[f64]) -> Result<(), ProbError> {
    if weights.is_empty() {
        return Err(ProbError::Empty);
    }
    for (index, &value) in weights.iter().enumerate() {
        if !value.is_finite() {
            return Err(ProbError::NonFinite { index });
        }
        if value < 0.0 {
            return Err(ProbError::Negative { index, value });
        }
    }
    Ok(())
}

pub(crate) fn same_len(left: usize, right: usize) -> Result<(), ProbError> {
    if left != right {
        return Err(ProbError::LengthMismatch { left, right });
    }
    Ok(())
}

/// Normalizes `weights` into a [`Distribution`].
pub fn make_distribution(weights: &[f64]) -> Result<Distribution, ProbError> {
    Distribution::from_weights(weights)
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with `0 · ln(0 / q) = 0`.
pub fn exact_kl(p: &Distribution, q: &Distribution) -> Result<f64, ProbError> {
    same_len(p.len(), q.len())?;
    let mut kl = 0.0;
    for (index, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(ProbError::InfiniteDivergence { index });
        }
        kl += pi * (pi / qi).ln();
    }
    // Round-off can leave a tiny negative sum for p ≈ q.
    Ok(kl.max(0.0))
}

/// `ψ(r) = r - ln r - 1`, nonnegative with its only zero at `r = 1`.
///
/// With `r = π_ref(y) / π(y)` and `y ~ π`, `E[ψ(r)] = KL(π ‖ π_ref)`.
pub fn k3_term(ratio: f64) -> Result<f64, ProbError> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(ProbError::InvalidRatio(ratio));
    }
    Ok(k3_unchecked(ratio))
}

#[inline]
pub(crate) fn k3_unchecked(ratio: f64) -> f64 {
    // ln_1p keeps precision when r is close to 1.
    let x = ratio - 1.0;
    (x - x.ln_1p()).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalizes_weights() {
        assert_eq!(make_distribution(&[2.0, 2.0]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(make_distribution(&[1.0, 0.0, 0.0]).unwrap().probs(), &[1.0, 0.0, 0.0]);
        assert_eq!(make_distribution(&[3.0, 1.0]).unwrap().probs(), &[0.75, 0.25]);
    }

    #[test]
    fn rejects_bad_weights_distinctly() {
        assert_eq!(make_distribution(&[]), Err(ProbError::Empty));
        assert!(matches!(make_distribution(&[1.0, -0.5]), Err(ProbError::Negative { index: 1, .. })));
        assert_eq!(make_distribution(&[1.0, f64::NAN]), Err(ProbError::NonFinite { index: 1 }));
        assert_eq!(make_distribution(&[f64::INFINITY]), Err(ProbError::NonFinite { index: 0 }));
        assert_eq!(make_distribution(&[0.0, 0.0]), Err(ProbError::ZeroMass));
    }

    #[test]
    fn new_requires_normalization() {
        assert!(matches!(Distribution::new(vec![0.5, 0.6]), Err(ProbError::NotNormalized { .. })));
        assert!(Distribution::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn floor_check() {
        let d = make_distribution(&[1.0, 0.0]).unwrap();
        assert!(matches!(d.require_positive(DEFAULT_FLOOR), Err(ProbError::BelowFloor { index: 1, .. })));
        assert!(make_distribution(&[1.0, 1.0]).unwrap().is_positive(DEFAULT_FLOOR));
    }

    #[test]
    fn kl_examples() {
        let half = make_distribution(&[1.0, 1.0]).unwrap();
        assert_eq!(exact_kl(&half, &half).unwrap(), 0.0);
        let point = make_distribution(&[1.0, 0.0]).unwrap();
        assert!(close(exact_kl(&point, &half).unwrap(), 2f64.ln(), 1e-15));
        let p = make_distribution(&[3.0, 1.0]).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!(close(exact_kl(&p, &half).unwrap(), expected, 1e-15));
        assert!(close(expected, 0.130812, 1e-6));
    }

    #[test]
    fn kl_errors() {
        let half = make_distribution(&[1.0, 1.0]).unwrap();
        let three = Distribution::uniform(3).unwrap();
        assert!(matches!(exact_kl(&half, &three), Err(ProbError::LengthMismatch { .. })));
        let point = make_distribution(&[0.0, 1.0]).unwrap();
        assert_eq!(exact_kl(&half, &point), Err(ProbError::InfiniteDivergence { index: 0 }));
    }

    #[test]
    fn k3_examples() {
        assert_eq!(k3_term(1.0).unwrap(), 0.0);
        assert!(close(k3_term(2.0).unwrap(), 2.0 - 2f64.ln() - 1.0, 1e-15));
        assert!(close(k3_term(2.0).unwrap(), 0.306853, 1e-6));
        assert!(close(k3_term(0.5).unwrap(), 0.5 - 0.5f64.ln() - 1.0, 1e-15));
        assert!(close(k3_term(0.5).unwrap(), 0.193147, 1e-6));
    }

    #[test]
    fn k3_rejects_invalid() {
        for r in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(k3_term(r).is_err(), "{r}");
        }
    }

    #[test]
    fn k3_nonnegative_on_log_sweep() {
        let steps = 10_000;
        for i in 0..=steps {
            let log_r = -6.0 + 12.0 * i as f64 / steps as f64;
            let r = 10f64.powf(log_r);
            assert!(k3_term(r).unwrap() >= 0.0, "r = {r}");
        }
    }

    #[test]
    fn distribution_json_validates() {
        let d: Distribution = serde_json::from_str("[0.25, 0.75]").unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
        assert!(serde_json::from_str::<Distribution>("[0.5, 0.7]").is_err());
        assert!(serde_json::from_str::<UtilityVector>("[1.0, 2.0]").is_ok());
    }
}
