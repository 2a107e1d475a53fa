//! Probability distributions over a small token vocabulary.
//!
//! Everything downstream (the decode protocol, the adapter, the synthetic
//! workloads) speaks in [`ProbDist`] values: linear probabilities, natural
//! logarithms throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token identifier. Ids are dense in `0..vocab_size`.
pub type TokenId = u32;

/// Absolute tolerance on the sum of a distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Floor applied to the reference distribution before dividing in [`kld`].
pub const KLD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("vocabulary must contain at least 2 tokens, got {0}")]
    VocabularyTooSmall(usize),
    #[error("probability at index {index} is invalid ({value})")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabularyMismatch { left: usize, right: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("weights have no positive mass")]
    ZeroMass,
}

/// Number of token ids in a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary(usize);

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self, DistError> {
        if size < 2 {
            return Err(DistError::VocabularyTooSmall(size));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }
}

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    /// Validates and wraps a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        Vocabulary::new(probs.len())?;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistError::InvalidEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self, DistError> {
        Vocabulary::new(weights.len())?;
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistError::InvalidEntry { index, value });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(DistError::ZeroMass);
        }
        Ok(Self {
            probs: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(vocab: Vocabulary) -> Self {
        let n = vocab.size();
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(vocab: Vocabulary, id: TokenId) -> Result<Self, DistError> {
        let n = vocab.size();
        if id as usize >= n {
            return Err(DistError::TokenOutOfRange { id: id as usize, size: n });
        }
        let mut probs = vec![0.0; n];
        probs[id as usize] = 1.0;
        Ok(Self { probs })
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

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary(self.probs.len())
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    /// Most likely token; ties resolve to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Standard tempering `p^(1/T)` renormalized. `T == 1` is the identity and
    /// `T == 0` collapses onto the argmax.
    pub fn tempered(&self, temperature: f64) -> Self {
        if temperature == 1.0 {
            return self.clone();
        }
        if temperature <= 0.0 {
            let mut probs = vec![0.0; self.probs.len()];
            probs[self.argmax() as usize] = 1.0;
            return Self { probs };
        }
        // Work in log space so small temperatures do not underflow to all zeros.
        let logs: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        }
    }

    /// Normalized positive part of `self - other`, the residual used on rejection.
    /// Returns `None` when the residual carries no mass.
    pub fn residual(&self, other: &ProbDist) -> Option<ProbDist> {
        let weights: Vec<f64> = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| (p - q).max(0.0))
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return None;
        }
        Some(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Total-variation distance.
    pub fn total_variation(&self, other: &ProbDist) -> Result<f64, DistError> {
        check_same_vocab(self, other)?;
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>())
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = DistError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(dist: ProbDist) -> Self {
        dist.probs
    }
}

fn check_same_vocab(p: &ProbDist, q: &ProbDist) -> Result<(), DistError> {
    if p.len() != q.len() {
        return Err(DistError::VocabularyMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// Which argument of the divergence is the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    /// `D(target ‖ draft)`.
    #[default]
    TargetDraft,
    /// `D(draft ‖ target)`.
    DraftTarget,
}

impl KldDirection {
    pub fn divergence(self, target: &ProbDist, draft: &ProbDist) -> Result<f64, DistError> {
        match self {
            KldDirection::TargetDraft => kld(target, draft),
            KldDirection::DraftTarget => kld(draft, target),
        }
    }
}

/// `D(p ‖ q) = Σ p_i ln(p_i / q_i)`, natural log, with `0 · ln(0/·) = 0`.
///
/// When `p` puts mass where `q` is below [`KLD_FLOOR`], `q` is floored there and
/// renormalized so the result stays finite. Otherwise `q` is used as is, which
/// keeps `kld(p, p)` exactly zero.
pub fn kld(p: &ProbDist, q: &ProbDist) -> Result<f64, DistError> {
    check_same_vocab(p, q)?;
    let needs_floor = p
        .probs
        .iter()
        .zip(&q.probs)
        .any(|(&pi, &qi)| pi > 0.0 && qi < KLD_FLOOR);

    let total = if needs_floor {
        let floored: Vec<f64> = q.probs.iter().map(|&qi| qi.max(KLD_FLOOR)).collect();
        let norm: f64 = floored.iter().sum();
        divergence_terms(&p.probs, floored.iter().map(|&qi| qi / norm))
    } else {
        divergence_terms(&p.probs, q.probs.iter().copied())
    };
    // Rounding in the individual terms can leave a tiny negative residue.
    Ok(total.max(0.0))
}

fn divergence_terms(p: &[f64], q: impl Iterator<Item = f64>) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, qi)| if pi > 0.0 && pi != qi { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbDist) -> f64 {
    let h: f64 = p
        .probs
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| -pi * pi.ln())
        .sum();
    h.max(0.0)
}

/// Seeded, reproducible stream of uniform draws.
///
/// Each logical sequence owns exactly one of these.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

/// Inverse-CDF draw using exactly one uniform from `rng`.
pub fn sample(p: &ProbDist, rng: &mut RandomSource) -> TokenId {
    sample_with_uniform(p, rng.uniform())
}

/// Inverse-CDF lookup for a given uniform `u` in `[0, 1)`.
pub fn sample_with_uniform(p: &ProbDist, u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.probs.iter().enumerate() {
        if pi > 0.0 {
            cumulative += pi;
            last_positive = i;
            if u < cumulative {
                return i as TokenId;
            }
        }
    }
    // u landed in the rounding gap above the final cumulative sum.
    last_positive as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kld_identity_is_zero() {
        let p = dist(&[0.1, 0.2, 0.0, 0.7]);
        assert_eq!(kld(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kld_two_point_value() {
        let v = kld(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        assert!((v - 0.143841036225890).abs() < 1e-12, "{v}");
    }

    #[test]
    fn kld_rejects_mismatched_vocab() {
        let err = kld(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5])).unwrap_err();
        assert!(err.to_string().contains("vocabulary mismatch"));
    }

    #[test]
    fn kld_zero_reference_stays_finite() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        let v = kld(&p, &q).unwrap();
        assert!(v.is_finite() && v > 10.0);
    }

    #[test]
    fn entropy_reference_values() {
        let v4 = Vocabulary::new(4).unwrap();
        assert_eq!(entropy(&ProbDist::one_hot(v4, 2).unwrap()), 0.0);
        assert!((entropy(&ProbDist::uniform(v4)) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&dist(&[0.5, 0.5])) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn construction_rejects_bad_vectors() {
        assert!(matches!(
            ProbDist::new(vec![0.5, 0.6]),
            Err(DistError::NotNormalized(_))
        ));
        assert!(matches!(
            ProbDist::new(vec![1.5, -0.5]),
            Err(DistError::InvalidEntry { index: 1, .. })
        ));
        assert!(matches!(ProbDist::new(vec![1.0]), Err(DistError::VocabularyTooSmall(1))));
        assert!(ProbDist::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn sample_one_hot_and_determinism() {
        let v = Vocabulary::new(5).unwrap();
        let p = ProbDist::one_hot(v, 3).unwrap();
        let mut rng = RandomSource::new(1);
        assert!((0..100).all(|_| sample(&p, &mut rng) == 3));

        let u = ProbDist::uniform(Vocabulary::new(8).unwrap());
        let mut a = RandomSource::new(42);
        let mut b = RandomSource::new(42);
        let xs: Vec<_> = (0..1000).map(|_| sample(&u, &mut a)).collect();
        let ys: Vec<_> = (0..1000).map(|_| sample(&u, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn sample_uniform_frequencies() {
        let u = ProbDist::uniform(Vocabulary::new(8).unwrap());
        let mut rng = RandomSource::new(7);
        let n = 1_000_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[sample(&u, &mut rng) as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.125).abs() < 0.005, "{f}");
        }
    }

    #[test]
    fn tempering() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(p.tempered(1.0), p);
        assert_eq!(p.tempered(0.0).argmax(), 2);
        assert_eq!(p.tempered(0.0).prob(2), 1.0);
        let hot = p.tempered(100.0);
        assert!(entropy(&hot) > entropy(&p));
        let cold = p.tempered(0.5);
        assert!(entropy(&cold) < entropy(&p));
    }

    #[test]
    fn reverse_direction_swaps_arguments() {
        let t = dist(&[0.5, 0.5]);
        let d = dist(&[0.25, 0.75]);
        assert_eq!(
            KldDirection::DraftTarget.divergence(&t, &d).unwrap(),
            kld(&d, &t).unwrap()
        );
    }
}
