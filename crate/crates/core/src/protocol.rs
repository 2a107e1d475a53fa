//! Draft-then-verify speculative decoding for a single sequence.
//!
//! The verifier is the standard speculative sampler: a drafted token `x` is
//! kept with probability `min(1, p(x) / q(x))`; the first rejection is replaced
//! by a draw from `normalize(max(0, p - q))`; when every drafted token survives
//! a bonus token is drawn from the target at the next position. The emitted
//! stream is therefore distributed exactly as target autoregressive sampling.
//!
//! RNG discipline for `verify`: `k` uniforms are consumed up front, one per
//! drafted position and in order, followed by exactly one uniform for the
//! recovery or bonus token. Greedy mode consumes the same draws so streams
//! stay aligned across modes.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{
    entropy, sample, sample_with_uniform, DistError, KldDirection, ProbDist, RandomSource, TokenId,
    Vocabulary,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("empty proposal: speculation length must be at least 1")]
    EmptyProposal,
    #[error("stale proposal: drafted against a different context")]
    StaleProposal,
    #[error("no verification results to aggregate")]
    NoResults,
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// A next-token model. Must be deterministic in its context.
pub trait TokenModel: Send + Sync + fmt::Debug {
    fn vocab(&self) -> Vocabulary;

    fn next_dist(&self, context: &[TokenId]) -> ProbDist;
}

impl<M: TokenModel + ?Sized> TokenModel for Arc<M> {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        (**self).next_dist(context)
    }
}

/// First-order table model: one row for the empty context plus one row per
/// possible previous token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableModel {
    start: ProbDist,
    rows: Vec<ProbDist>,
}

impl TableModel {
    pub fn new(start: ProbDist, rows: Vec<ProbDist>) -> Result<Self, DistError> {
        let n = start.len();
        if rows.len() != n {
            return Err(DistError::VocabularyMismatch { left: n, right: rows.len() });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(DistError::VocabularyMismatch { left: n, right: bad.len() });
        }
        Ok(Self { start, rows })
    }

    /// Same distribution regardless of context.
    pub fn constant(dist: ProbDist) -> Self {
        Self {
            rows: vec![dist.clone(); dist.len()],
            start: dist,
        }
    }
}

impl TokenModel for TableModel {
    fn vocab(&self) -> Vocabulary {
        self.start.vocab()
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        match context.last() {
            None => self.start.clone(),
            Some(&t) => self.rows[t as usize].clone(),
        }
    }
}

/// How tokens are chosen from a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Stochastic,
    /// Temperature zero: argmax drafting, accept iff the target argmax agrees.
    Greedy,
}

impl SamplingMode {
    fn pick(self, dist: &ProbDist, rng: &mut RandomSource) -> TokenId {
        match self {
            SamplingMode::Stochastic => sample(dist, rng),
            SamplingMode::Greedy => {
                rng.uniform();
                dist.argmax()
            }
        }
    }
}

/// Tokens drafted for one verification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftProposal {
    context: Vec<TokenId>,
    mode: SamplingMode,
    pub tokens: Vec<TokenId>,
    pub draft_dists: Vec<ProbDist>,
}

impl DraftProposal {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }
}

/// Outcome of verifying one [`DraftProposal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub accepted_count: usize,
    /// Accepted prefix followed by exactly one recovery or bonus token.
    pub emitted_tokens: Vec<TokenId>,
    /// Divergence at every drafted position, rejected ones included.
    pub per_token_kld: Vec<f64>,
    /// Draft entropy at every drafted position.
    pub per_token_entropy: Vec<f64>,
    pub per_token_accepted: Vec<bool>,
}

impl VerificationResult {
    pub fn proposed(&self) -> usize {
        self.per_token_accepted.len()
    }
}

/// Drafts exactly `k` tokens autoregressively.
pub fn propose(
    draft: &dyn TokenModel,
    context: &[TokenId],
    k: usize,
    mode: SamplingMode,
    rng: &mut RandomSource,
) -> Result<DraftProposal, ProtocolError> {
    propose_until(draft, context, k, mode, rng, |_, _| false)
}

/// Drafts up to `max_k` tokens, stopping early once `stop(dist, drafted)`
/// returns true. `dist` is the distribution the latest token was drawn from
/// and `drafted` counts tokens drafted so far, that one included.
pub fn propose_until<F>(
    draft: &dyn TokenModel,
    context: &[TokenId],
    max_k: usize,
    mode: SamplingMode,
    rng: &mut RandomSource,
    mut stop: F,
) -> Result<DraftProposal, ProtocolError>
where
    F: FnMut(&ProbDist, usize) -> bool,
{
    if max_k == 0 {
        return Err(ProtocolError::EmptyProposal);
    }
    let mut extended = context.to_vec();
    let mut tokens = Vec::with_capacity(max_k);
    let mut draft_dists = Vec::with_capacity(max_k);
    while tokens.len() < max_k {
        let dist = draft.next_dist(&extended);
        let token = mode.pick(&dist, rng);
        tokens.push(token);
        extended.push(token);
        let halt = stop(&dist, tokens.len());
        draft_dists.push(dist);
        if halt {
            break;
        }
    }
    Ok(DraftProposal {
        context: context.to_vec(),
        mode,
        tokens,
        draft_dists,
    })
}

/// Verifies `proposal` against `target`, recording `D(target ‖ draft)` per
/// position.
pub fn verify(
    target: &dyn TokenModel,
    context: &[TokenId],
    proposal: &DraftProposal,
    rng: &mut RandomSource,
) -> Result<VerificationResult, ProtocolError> {
    verify_with(target, context, proposal, KldDirection::TargetDraft, rng)
}

pub fn verify_with(
    target: &dyn TokenModel,
    context: &[TokenId],
    proposal: &DraftProposal,
    direction: KldDirection,
    rng: &mut RandomSource,
) -> Result<VerificationResult, ProtocolError> {
    if proposal.is_empty() {
        return Err(ProtocolError::EmptyProposal);
    }
    if proposal.context != context {
        return Err(ProtocolError::StaleProposal);
    }
    let k = proposal.len();
    let uniforms: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
    let final_uniform = rng.uniform();

    // Target distributions at all k+1 positions, as one batched pass would.
    let mut extended = context.to_vec();
    let mut target_dists = Vec::with_capacity(k + 1);
    for &token in &proposal.tokens {
        target_dists.push(target.next_dist(&extended));
        extended.push(token);
    }
    target_dists.push(target.next_dist(&extended));

    let mut per_token_kld = Vec::with_capacity(k);
    let mut per_token_entropy = Vec::with_capacity(k);
    for (p, q) in target_dists.iter().zip(&proposal.draft_dists) {
        per_token_kld.push(direction.divergence(p, q)?);
        per_token_entropy.push(entropy(q));
    }

    let mut per_token_accepted = vec![false; k];
    let mut emitted_tokens = Vec::with_capacity(k + 1);
    let mut rejected_at = None;
    for i in 0..k {
        let token = proposal.tokens[i];
        let p = &target_dists[i];
        let q = &proposal.draft_dists[i];
        let accept = match proposal.mode {
            SamplingMode::Stochastic => {
                let qx = q.prob(token);
                qx > 0.0 && uniforms[i] < p.prob(token) / qx
            }
            SamplingMode::Greedy => p.argmax() == token,
        };
        if !accept {
            rejected_at = Some(i);
            break;
        }
        per_token_accepted[i] = true;
        emitted_tokens.push(token);
    }

    let last = match rejected_at {
        Some(i) => {
            let p = &target_dists[i];
            match proposal.mode {
                SamplingMode::Greedy => p.argmax(),
                SamplingMode::Stochastic => {
                    let residual = p.residual(&proposal.draft_dists[i]);
                    sample_with_uniform(residual.as_ref().unwrap_or(p), final_uniform)
                }
            }
        }
        None => match proposal.mode {
            SamplingMode::Greedy => target_dists[k].argmax(),
            SamplingMode::Stochastic => sample_with_uniform(&target_dists[k], final_uniform),
        },
    };
    emitted_tokens.push(last);

    Ok(VerificationResult {
        accepted_count: emitted_tokens.len() - 1,
        emitted_tokens,
        per_token_kld,
        per_token_entropy,
        per_token_accepted,
    })
}

/// One plain target step, no drafting. Consumes one uniform.
pub fn target_step(
    target: &dyn TokenModel,
    context: &[TokenId],
    mode: SamplingMode,
    rng: &mut RandomSource,
) -> TokenId {
    mode.pick(&target.next_dist(context), rng)
}

/// Accepted over proposed tokens across `results`.
pub fn acceptance_rate(results: &[VerificationResult]) -> Result<f64, ProtocolError> {
    let proposed: usize = results.iter().map(VerificationResult::proposed).sum();
    if results.is_empty() || proposed == 0 {
        return Err(ProtocolError::NoResults);
    }
    let accepted: usize = results.iter().map(|r| r.accepted_count).sum();
    Ok(accepted as f64 / proposed as f64)
}
