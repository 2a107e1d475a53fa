//! Seeded synthetic draft/target pairs with dialable disagreement.
//!
//! The target is a random first-order table that also varies with position
//! modulo [`POSITION_PERIOD`]. The draft mixes each target row with a noise
//! row, `q = (1 - lambda) p + lambda n`, where `lambda` is found by bisection
//! so that `D(p ‖ q)` hits the divergence level of the phase active at that
//! position. `D(p ‖ (1 - lambda) p + lambda n)` is convex in `lambda` and zero
//! at the origin, hence monotone on `[0, 1]`.
//!
//! Phases are laid out over generated positions and repeat once the list is
//! exhausted.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{kld, DistError, ProbDist, RandomSource, TokenId, Vocabulary};
use crate::engine::ModelPair;
use crate::protocol::{SamplingMode, TokenModel};

/// Target rows repeat with this period over positions.
pub const POSITION_PERIOD: usize = 4;

const BISECTION_ROUNDS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload: {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Dist(#[from] DistError),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> WorkloadError {
    WorkloadError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// A stretch of positions with a common disagreement regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimePhase {
    pub length_steps: usize,
    /// Target mean divergence over the phase.
    pub divergence_level: f64,
    /// Half-width of the per-row spread around the level.
    #[serde(default)]
    pub divergence_jitter: f64,
    /// Allows `divergence_jitter > divergence_level`.
    #[serde(default)]
    pub high_variance: bool,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_sharpness() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPairConfig {
    pub vocab_size: usize,
    pub phases: Vec<RegimePhase>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Exponent applied to uniform draws when building target rows; larger
    /// values give peakier targets.
    #[serde(default = "default_sharpness")]
    pub target_sharpness: f64,
}

impl SyntheticPairConfig {
    pub fn single_phase(vocab_size: usize, level: f64, jitter: f64, seed: u64) -> Self {
        Self {
            vocab_size,
            phases: vec![RegimePhase {
                length_steps: 64,
                divergence_level: level,
                divergence_jitter: jitter,
                high_variance: false,
            }],
            temperature: 1.0,
            seed,
            target_sharpness: default_sharpness(),
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size", "must be at least 2"));
        }
        if self.phases.is_empty() {
            return Err(invalid("phases", "must not be empty"));
        }
        for (i, phase) in self.phases.iter().enumerate() {
            let field = |name: &str| format!("phases[{i}].{name}");
            if phase.length_steps == 0 {
                return Err(invalid(field("length_steps"), "must be at least 1"));
            }
            if !(phase.divergence_level >= 0.0 && phase.divergence_level.is_finite()) {
                return Err(invalid(field("divergence_level"), "must be finite and >= 0"));
            }
            if !(phase.divergence_jitter >= 0.0 && phase.divergence_jitter.is_finite()) {
                return Err(invalid(field("divergence_jitter"), "must be finite and >= 0"));
            }
            if phase.divergence_jitter > phase.divergence_level && !phase.high_variance {
                return Err(invalid(
                    field("divergence_jitter"),
                    "exceeds divergence_level; set high_variance to allow it",
                ));
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be finite and >= 0"));
        }
        if !(self.target_sharpness > 0.0 && self.target_sharpness.is_finite()) {
            return Err(invalid("target_sharpness", "must be positive"));
        }
        Ok(())
    }

    /// Positions covered by one pass over the phase list.
    pub fn cycle_len(&self) -> usize {
        self.phases.iter().map(|p| p.length_steps).sum()
    }
}

/// Table model keyed by (phase, position mod period, previous token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    vocab: usize,
    /// Cumulative phase end positions within one cycle.
    phase_ends: Vec<usize>,
    rows: Vec<ProbDist>,
}

impl SyntheticModel {
    fn rows_per_phase(vocab: usize) -> usize {
        POSITION_PERIOD * (vocab + 1)
    }

    fn slot(vocab: usize, position: usize, prev: Option<TokenId>) -> usize {
        let prev_idx = prev.map_or(0, |t| t as usize + 1);
        (position % POSITION_PERIOD) * (vocab + 1) + prev_idx
    }

    /// Index of the phase active at `position`.
    pub fn phase_at(&self, position: usize) -> usize {
        let cycle = *self.phase_ends.last().expect("at least one phase");
        let offset = position % cycle;
        self.phase_ends.partition_point(|&end| end <= offset)
    }

    pub fn rows(&self) -> &[ProbDist] {
        &self.rows
    }
}

impl TokenModel for SyntheticModel {
    fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab).expect("validated at construction")
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        let position = context.len();
        let phase = if self.phase_ends.len() == 1 {
            0
        } else {
            self.phase_at(position)
        };
        let idx = phase * Self::rows_per_phase(self.vocab)
            + Self::slot(self.vocab, position, context.last().copied());
        self.rows[idx].clone()
    }
}

/// A generated pair plus the sampling mode implied by its temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub target: SyntheticModel,
    pub draft: SyntheticModel,
    pub mode: SamplingMode,
}

impl SyntheticPair {
    pub fn into_model_pair(self) -> ModelPair {
        ModelPair {
            target: Arc::new(self.target),
            draft: Arc::new(self.draft),
            mode: self.mode,
        }
    }
}

fn peaked_row(rng: &mut RandomSource, vocab: usize, sharpness: f64) -> Result<ProbDist, DistError> {
    // Floor keeps every token reachable so divergences stay finite.
    let weights: Vec<f64> = (0..vocab)
        .map(|_| rng.uniform().powf(sharpness) + 1e-3)
        .collect();
    ProbDist::from_weights(&weights)
}

/// Noise that avoids the target's likely tokens.
fn noise_row(rng: &mut RandomSource, target: &ProbDist) -> Result<ProbDist, DistError> {
    let weights: Vec<f64> = target
        .probs()
        .iter()
        .map(|&p| rng.uniform() * (1.0 - p).powi(8) + 1e-6)
        .collect();
    ProbDist::from_weights(&weights)
}

fn mix(p: &ProbDist, n: &ProbDist, lambda: f64) -> ProbDist {
    let weights: Vec<f64> = p
        .probs()
        .iter()
        .zip(n.probs())
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    ProbDist::from_weights(&weights).expect("convex combination of distributions")
}

/// Smallest mixture weight reaching `level`, or 1 when unreachable.
fn solve_lambda(p: &ProbDist, n: &ProbDist, level: f64) -> Result<f64, DistError> {
    if level <= 0.0 {
        return Ok(0.0);
    }
    if kld(p, n)? <= level {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BISECTION_ROUNDS {
        let mid = 0.5 * (lo + hi);
        if kld(p, &mix(p, n, mid))? < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Builds a seeded target and its phase-modulated draft.
pub fn gen_pair(config: &SyntheticPairConfig) -> Result<SyntheticPair, WorkloadError> {
    config.validate()?;
    let vocab = config.vocab_size;
    let mut rng = RandomSource::new(config.seed);
    let per_phase = SyntheticModel::rows_per_phase(vocab);

    let target_rows = (0..per_phase)
        .map(|_| peaked_row(&mut rng, vocab, config.target_sharpness))
        .collect::<Result<Vec<_>, _>>()?;
    let noise_rows = target_rows
        .iter()
        .map(|p| noise_row(&mut rng, p))
        .collect::<Result<Vec<_>, _>>()?;

    let mut draft_rows = Vec::with_capacity(per_phase * config.phases.len());
    for phase in &config.phases {
        for (p, n) in target_rows.iter().zip(&noise_rows) {
            let spread = 2.0 * rng.uniform() - 1.0;
            let level = (phase.divergence_level + phase.divergence_jitter * spread).max(0.0);
            let lambda = solve_lambda(p, n, level)?;
            draft_rows.push(if lambda == 0.0 { p.clone() } else { mix(p, n, lambda) });
        }
    }

    let mode = if config.temperature == 0.0 {
        SamplingMode::Greedy
    } else {
        SamplingMode::Stochastic
    };
    let temper = |rows: Vec<ProbDist>| -> Vec<ProbDist> {
        if mode == SamplingMode::Greedy || config.temperature == 1.0 {
            rows
        } else {
            rows.iter().map(|r| r.tempered(config.temperature)).collect()
        }
    };

    let mut phase_ends = Vec::with_capacity(config.phases.len());
    let mut end = 0;
    for phase in &config.phases {
        end += phase.length_steps;
        phase_ends.push(end);
    }

    Ok(SyntheticPair {
        target: SyntheticModel {
            vocab,
            phase_ends: vec![end],
            rows: temper(target_rows),
        },
        draft: SyntheticModel {
            vocab,
            phase_ends,
            rows: temper(draft_rows),
        },
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{propose, verify};

    fn two_phase(seed: u64) -> SyntheticPairConfig {
        SyntheticPairConfig {
            vocab_size: 8,
            phases: vec![
                RegimePhase {
                    length_steps: 20,
                    divergence_level: 0.05,
                    divergence_jitter: 0.02,
                    high_variance: false,
                },
                RegimePhase {
                    length_steps: 10,
                    divergence_level: 1.0,
                    divergence_jitter: 0.5,
                    high_variance: false,
                },
            ],
            temperature: 1.0,
            seed,
            target_sharpness: 3.0,
        }
    }

    #[test]
    fn phase_lookup() {
        let pair = gen_pair(&two_phase(1)).unwrap();
        assert_eq!(pair.draft.phase_at(0), 0);
        assert_eq!(pair.draft.phase_at(19), 0);
        assert_eq!(pair.draft.phase_at(20), 1);
        assert_eq!(pair.draft.phase_at(29), 1);
        assert_eq!(pair.draft.phase_at(30), 0);
    }

    #[test]
    fn zero_divergence_copies_target() {
        let cfg = SyntheticPairConfig::single_phase(6, 0.0, 0.0, 4);
        let pair = gen_pair(&cfg).unwrap();
        assert_eq!(pair.target.rows(), pair.draft.rows());
    }

    #[test]
    fn deterministic_tables() {
        let a = gen_pair(&two_phase(9)).unwrap();
        let b = gen_pair(&two_phase(9)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.draft).unwrap(),
            serde_json::to_string(&b.draft).unwrap()
        );
        let c = gen_pair(&two_phase(10)).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn rows_hit_their_level() {
        let cfg = SyntheticPairConfig::single_phase(8, 0.3, 0.0, 2);
        let pair = gen_pair(&cfg).unwrap();
        for (p, q) in pair.target.rows().iter().zip(pair.draft.rows()) {
            assert!((kld(p, q).unwrap() - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn validation_errors() {
        let mut cfg = SyntheticPairConfig::single_phase(1, 0.1, 0.0, 0);
        assert!(matches!(gen_pair(&cfg), Err(WorkloadError::Invalid { .. })));
        cfg.vocab_size = 4;
        cfg.phases[0].divergence_jitter = 0.5;
        let err = gen_pair(&cfg).unwrap_err().to_string();
        assert!(err.contains("phases[0].divergence_jitter"), "{err}");
        cfg.phases[0].high_variance = true;
        assert!(gen_pair(&cfg).is_ok());
        cfg.phases.clear();
        assert!(gen_pair(&cfg).is_err());
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let mut cfg = SyntheticPairConfig::single_phase(4, 0.1, 0.0, 0);
        cfg.temperature = 0.0;
        assert_eq!(gen_pair(&cfg).unwrap().mode, SamplingMode::Greedy);
    }

    #[test]
    fn phases_order_realized_divergence() {
        let pair = gen_pair(&two_phase(3)).unwrap();
        let mut rng = RandomSource::new(5);
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        let mut ctx: Vec<TokenId> = Vec::new();
        while ctx.len() < 3000 {
            let p = propose(&pair.draft, &ctx, 3, pair.mode, &mut rng).unwrap();
            let r = verify(&pair.target, &ctx, &p, &mut rng).unwrap();
            for (i, v) in r.per_token_kld.iter().enumerate() {
                let phase = pair.draft.phase_at(ctx.len() + i);
                sums[phase] += v;
                counts[phase] += 1;
            }
            ctx.extend(r.emitted_tokens);
        }
        let low = sums[0] / counts[0] as f64;
        let high = sums[1] / counts[1] as f64;
        assert!(low < high, "{low} vs {high}");
    }
}
