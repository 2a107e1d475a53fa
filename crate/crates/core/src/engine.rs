//! Per-sequence ("ragged") batched speculative decoding over a simulated clock.
//!
//! Every batch step drafts and verifies each active sequence with its own
//! speculation length. The step is a global barrier: drafting is sequential
//! per token, so the draft phase lasts as long as the longest proposal, and
//! verification is padded to the widest column. Short sequences wait on the
//! straggler. A batch-wide cap at the mean prediction bounds that wait.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, CalibrationAccumulator, SlAdapter};
use crate::dist::{entropy, KldDirection, RandomSource, TokenId};
use crate::metrics::RunMetrics;
use crate::protocol::{
    propose, propose_until, target_step, verify_with, ProtocolError, SamplingMode, TokenModel,
};
use crate::workloads::{SignalTrace, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("empty step: every sequence has finished")]
    EmptyStep,
    #[error("empty batch: no predictions to cap")]
    EmptyBatch,
    #[error("sequence {0} has no token budget")]
    ZeroBudget(usize),
    #[error("invalid cost model: {0}")]
    InvalidCost(&'static str),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Simulated step costs, in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Per drafted token; tokens are drafted sequentially within a sequence
    /// and in parallel across sequences.
    pub c_draft: f64,
    /// Fixed cost of one batched verification pass.
    pub c_verify_base: f64,
    /// Per token column of the verification pass.
    pub c_verify_per_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c_draft: 0.1,
            c_verify_base: 1.0,
            c_verify_per_token: 0.02,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.c_draft) {
            return Err(EngineError::InvalidCost("c_draft must be positive"));
        }
        if !positive(self.c_verify_base) {
            return Err(EngineError::InvalidCost("c_verify_base must be positive"));
        }
        if !positive(self.c_verify_per_token) {
            return Err(EngineError::InvalidCost("c_verify_per_token must be positive"));
        }
        Ok(())
    }

    pub fn draft_time(&self, max_k: usize) -> f64 {
        self.c_draft * max_k as f64
    }

    pub fn verify_time(&self, max_k: usize) -> f64 {
        self.c_verify_base + self.c_verify_per_token * max_k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapMode {
    /// Each sequence runs at its own prediction.
    #[default]
    None,
    /// Cap at the MSE-minimizing consensus, the mean prediction.
    MeanMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapRounding {
    #[default]
    HalfEven,
    Floor,
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlCapPolicy {
    pub mode: CapMode,
    pub rounding: CapRounding,
    /// Lower bound on the cap.
    pub sl_min: usize,
}

impl Default for SlCapPolicy {
    fn default() -> Self {
        Self {
            mode: CapMode::None,
            rounding: CapRounding::HalfEven,
            sl_min: 2,
        }
    }
}

impl SlCapPolicy {
    pub fn mean_mse() -> Self {
        Self {
            mode: CapMode::MeanMse,
            ..Self::default()
        }
    }
}

/// Arithmetic mean of the predictions: the real minimizer of
/// `MSE(c) = mean((c - p_i)^2)`.
pub fn mean_prediction(predictions: &[usize]) -> Result<f64, EngineError> {
    if predictions.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    let sum: usize = predictions.iter().sum();
    Ok(sum as f64 / predictions.len() as f64)
}

/// Batch-wide speculation cap. `None` mode imposes nothing beyond the
/// largest prediction.
pub fn compute_sl_cap(predictions: &[usize], policy: &SlCapPolicy) -> Result<usize, EngineError> {
    let max = *predictions.iter().max().ok_or(EngineError::EmptyBatch)?;
    match policy.mode {
        CapMode::None => Ok(max),
        CapMode::MeanMse => {
            let mean = mean_prediction(predictions)?;
            let rounded = match policy.rounding {
                CapRounding::HalfEven => mean.round_ties_even(),
                CapRounding::Floor => mean.floor(),
                CapRounding::Ceil => mean.ceil(),
            };
            Ok((rounded as usize).max(policy.sl_min))
        }
    }
}

/// Draft and target for one sequence.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub target: Arc<dyn TokenModel>,
    pub draft: Arc<dyn TokenModel>,
    pub mode: SamplingMode,
}

/// Chooses each step's speculation length for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum SlController {
    /// No drafting; one target token per step.
    Autoregressive,
    Static { k: usize },
    /// Draft until the draft entropy exceeds `threshold` or `base_max_k`
    /// tokens are drafted.
    EntropyStop { threshold: f64, base_max_k: usize },
    Dsde(Box<SlAdapter>),
}

impl SlController {
    /// Upper bound this controller asks for on the next step.
    pub fn predicted_sl(&self) -> usize {
        match self {
            SlController::Autoregressive => 0,
            SlController::Static { k } => *k,
            SlController::EntropyStop { base_max_k, .. } => *base_max_k,
            SlController::Dsde(adapter) => adapter.decision().sl_hat,
        }
    }

    fn observe(&mut self, klds: &[f64], accepted: usize) {
        if let SlController::Dsde(adapter) = self {
            adapter.observe(klds, accepted);
        }
    }

    fn kld_direction(&self) -> KldDirection {
        match self {
            SlController::Dsde(adapter) => adapter.config().kld_direction,
            _ => KldDirection::TargetDraft,
        }
    }
}

/// One request in the batch.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub id: usize,
    pub context: Vec<TokenId>,
    pub prompt_len: usize,
    pub tokens_remaining: usize,
    pub controller: SlController,
    /// Length requested for the next step.
    pub current_sl: usize,
    pub finished: bool,
    pub models: Arc<ModelPair>,
    pub trace: SignalTrace,
    rng: RandomSource,
}

impl SequenceState {
    pub fn new(
        id: usize,
        prompt: Vec<TokenId>,
        budget: usize,
        controller: SlController,
        models: Arc<ModelPair>,
        seed: u64,
    ) -> Self {
        let current_sl = controller.predicted_sl();
        Self {
            id,
            prompt_len: prompt.len(),
            context: prompt,
            tokens_remaining: budget,
            controller,
            current_sl,
            finished: budget == 0,
            models,
            trace: SignalTrace::default(),
            rng: RandomSource::new(seed),
        }
    }

    /// Tokens generated after the prompt.
    pub fn generated(&self) -> &[TokenId] {
        &self.context[self.prompt_len..]
    }

    pub fn adapter(&self) -> Option<&SlAdapter> {
        match &self.controller {
            SlController::Dsde(a) => Some(a),
            _ => None,
        }
    }
}

/// One sequence's share of a batch step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStep {
    pub seq_id: usize,
    pub remaining_before: usize,
    /// Controller's request before the cap and budget clamp.
    pub predicted_sl: usize,
    /// Tokens actually drafted.
    pub proposed_k: usize,
    pub accepted: usize,
    pub emitted: Vec<TokenId>,
    /// Controller's request for the following step.
    pub next_sl: usize,
    pub kld: Vec<f64>,
    pub entropy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_index: usize,
    pub sl_cap_applied: Option<usize>,
    pub draft_phase_time: f64,
    pub verify_phase_time: f64,
    pub sequences: Vec<SequenceStep>,
}

impl StepReport {
    /// Widest proposal in the step; sets both phase costs.
    pub fn max_k(&self) -> usize {
        self.sequences.iter().map(|s| s.proposed_k).max().unwrap_or(0)
    }

    pub fn step_time(&self) -> f64 {
        self.draft_phase_time + self.verify_phase_time
    }
}

/// Advances every unfinished sequence by one draft/verify round.
pub fn step_batch(
    batch: &mut [SequenceState],
    step_index: usize,
    cost: &CostModel,
    policy: &SlCapPolicy,
) -> Result<StepReport, EngineError> {
    let active: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].finished).collect();
    if active.is_empty() {
        return Err(EngineError::EmptyStep);
    }

    let predictions: Vec<usize> = active.iter().map(|&i| batch[i].current_sl).collect();
    let cap = match policy.mode {
        CapMode::None => None,
        CapMode::MeanMse => Some(compute_sl_cap(&predictions, policy)?),
    };

    let mut sequences = Vec::with_capacity(active.len());
    for (&i, &predicted) in active.iter().zip(&predictions) {
        sequences.push(advance(&mut batch[i], predicted, cap)?);
    }

    apply_global_calibration(batch);
    for (entry, &i) in sequences.iter_mut().zip(&active) {
        let seq = &mut batch[i];
        seq.current_sl = seq.controller.predicted_sl();
        entry.next_sl = seq.current_sl;
    }

    let max_k = sequences.iter().map(|s| s.proposed_k).max().unwrap_or(0);
    Ok(StepReport {
        step_index,
        sl_cap_applied: cap,
        draft_phase_time: cost.draft_time(max_k),
        verify_phase_time: cost.verify_time(max_k),
        sequences,
    })
}

fn advance(
    seq: &mut SequenceState,
    predicted: usize,
    cap: Option<usize>,
) -> Result<SequenceStep, EngineError> {
    let remaining_before = seq.tokens_remaining;
    // A verification emits up to k + 1 tokens; keep that within budget.
    let k = predicted
        .min(cap.unwrap_or(usize::MAX))
        .min(remaining_before.saturating_sub(1));
    let models = Arc::clone(&seq.models);

    let (proposed_k, accepted, emitted, kld, ent) = if k == 0 {
        let token = target_step(models.target.as_ref(), &seq.context, models.mode, &mut seq.rng);
        (0, 0, vec![token], Vec::new(), Vec::new())
    } else {
        let proposal = match &seq.controller {
            SlController::EntropyStop { threshold, .. } => {
                let threshold = *threshold;
                propose_until(
                    models.draft.as_ref(),
                    &seq.context,
                    k,
                    models.mode,
                    &mut seq.rng,
                    |dist, _| entropy(dist) > threshold,
                )?
            }
            _ => propose(models.draft.as_ref(), &seq.context, k, models.mode, &mut seq.rng)?,
        };
        let result = verify_with(
            models.target.as_ref(),
            &seq.context,
            &proposal,
            seq.controller.kld_direction(),
            &mut seq.rng,
        )?;
        seq.controller.observe(&result.per_token_kld, result.accepted_count);
        seq.trace.records.push(TraceRecord {
            step: seq.trace.records.len() as u64,
            kld: result.per_token_kld.clone(),
            entropy: result.per_token_entropy.clone(),
            accepted: result.per_token_accepted.clone(),
        });
        (
            proposal.len(),
            result.accepted_count,
            result.emitted_tokens,
            result.per_token_kld,
            result.per_token_entropy,
        )
    };

    seq.context.extend_from_slice(&emitted);
    seq.tokens_remaining -= emitted.len();
    if seq.tokens_remaining == 0 {
        seq.finished = true;
    }

    Ok(SequenceStep {
        seq_id: seq.id,
        remaining_before,
        predicted_sl: predicted,
        proposed_k,
        accepted,
        emitted,
        next_sl: 0,
        kld,
        entropy: ent,
    })
}

/// Under global scope, pooled statistics are applied once any adapter has
/// finished its preliminary steps.
fn apply_global_calibration(batch: &mut [SequenceState]) {
    let ready = batch
        .iter()
        .filter_map(SequenceState::adapter)
        .any(SlAdapter::awaiting_calibration);
    if !ready {
        return;
    }
    let mut pooled = CalibrationAccumulator::default();
    for adapter in batch.iter().filter_map(SequenceState::adapter) {
        if let Some(acc) = adapter.pending_calibration() {
            if acc.steps > 0 {
                pooled.merge(acc);
            }
        }
    }
    let stats = pooled.stats();
    for seq in batch.iter_mut() {
        if let SlController::Dsde(adapter) = &mut seq.controller {
            if adapter.pending_calibration().is_some() {
                adapter.finish_calibration(stats);
            }
        }
    }
}

/// Output of [`run_until_done`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub reports: Vec<StepReport>,
}

/// Steps the batch until every sequence has exhausted its budget.
///
/// Terminates: every step emits at least one token per active sequence.
pub fn run_until_done(
    batch: &mut [SequenceState],
    cost: &CostModel,
    policy: &SlCapPolicy,
) -> Result<RunOutcome, EngineError> {
    cost.validate()?;
    if batch.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    if let Some(seq) = batch.iter().find(|s| s.tokens_remaining == 0) {
        return Err(EngineError::ZeroBudget(seq.id));
    }
    let mut reports = Vec::new();
    while batch.iter().any(|s| !s.finished) {
        reports.push(step_batch(batch, reports.len(), cost, policy)?);
    }
    Ok(RunOutcome {
        metrics: RunMetrics::from_reports(&reports),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::dist::{ProbDist, Vocabulary};
    use crate::protocol::TableModel;

    fn pair(target: ProbDist, draft: ProbDist) -> Arc<ModelPair> {
        Arc::new(ModelPair {
            target: Arc::new(TableModel::constant(target)),
            draft: Arc::new(TableModel::constant(draft)),
            mode: SamplingMode::Stochastic,
        })
    }

    fn same_pair() -> Arc<ModelPair> {
        let d = ProbDist::new(vec![0.7, 0.2, 0.1]).unwrap();
        pair(d.clone(), d)
    }

    fn cost() -> CostModel {
        CostModel {
            c_draft: 0.1,
            c_verify_base: 1.0,
            c_verify_per_token: 0.02,
        }
    }

    #[test]
    fn cap_examples() {
        let cap = SlCapPolicy::mean_mse();
        assert_eq!(compute_sl_cap(&[4, 2, 3, 1], &cap).unwrap(), 2);
        assert_eq!(compute_sl_cap(&[3, 3, 3, 3], &cap).unwrap(), 3);
        assert_eq!(compute_sl_cap(&[8, 2], &cap).unwrap(), 5);
        assert_eq!(compute_sl_cap(&[8, 2], &SlCapPolicy::default()).unwrap(), 8);
        assert_eq!(compute_sl_cap(&[], &cap), Err(EngineError::EmptyBatch));
        let floor = SlCapPolicy {
            rounding: CapRounding::Floor,
            ..cap
        };
        assert_eq!(compute_sl_cap(&[8, 3], &floor).unwrap(), 5);
        let ceil = SlCapPolicy {
            rounding: CapRounding::Ceil,
            ..cap
        };
        assert_eq!(compute_sl_cap(&[8, 3], &ceil).unwrap(), 6);
    }

    #[test]
    fn straggler_sets_draft_time() {
        let mk = |id, k| {
            SequenceState::new(id, vec![], 50, SlController::Static { k }, same_pair(), id as u64)
        };
        let mut batch = vec![mk(0, 8), mk(1, 2)];
        let r = step_batch(&mut batch, 0, &cost(), &SlCapPolicy::default()).unwrap();
        assert_eq!(r.draft_phase_time, 8.0 * 0.1);
        assert_eq!(r.verify_phase_time, 1.0 + 8.0 * 0.02);

        let mut batch = vec![mk(0, 8), mk(1, 2)];
        let r = step_batch(&mut batch, 0, &cost(), &SlCapPolicy::mean_mse()).unwrap();
        assert_eq!(r.sl_cap_applied, Some(5));
        assert_eq!(r.draft_phase_time, 5.0 * 0.1);
        assert_eq!(r.sequences[1].proposed_k, 2);
    }

    #[test]
    fn identical_models_take_ceil_steps() {
        for (budget, k) in [(10usize, 1usize), (10, 3), (17, 4), (1, 5)] {
            let mut batch = vec![SequenceState::new(
                0,
                vec![],
                budget,
                SlController::Static { k },
                same_pair(),
                9,
            )];
            let out = run_until_done(&mut batch, &cost(), &SlCapPolicy::default()).unwrap();
            assert_eq!(out.reports.len(), budget.div_ceil(k + 1), "budget {budget} k {k}");
            assert_eq!(batch[0].generated().len(), budget);
        }
    }

    #[test]
    fn autoregressive_emits_one_per_step() {
        let mut batch = vec![SequenceState::new(
            0,
            vec![],
            12,
            SlController::Autoregressive,
            same_pair(),
            3,
        )];
        let out = run_until_done(&mut batch, &cost(), &SlCapPolicy::default()).unwrap();
        assert_eq!(out.reports.len(), 12);
        assert_eq!(out.metrics.simulated_time, 12.0);
    }

    #[test]
    fn zero_budget_and_empty_step_errors() {
        let mut batch = vec![SequenceState::new(
            4,
            vec![],
            0,
            SlController::Static { k: 2 },
            same_pair(),
            0,
        )];
        assert_eq!(
            run_until_done(&mut batch, &cost(), &SlCapPolicy::default()).unwrap_err(),
            EngineError::ZeroBudget(4)
        );
        assert_eq!(
            step_batch(&mut batch, 0, &cost(), &SlCapPolicy::default()).unwrap_err(),
            EngineError::EmptyStep
        );
    }

    #[test]
    fn single_sequence_cap_never_binds() {
        let v = Vocabulary::new(4).unwrap();
        let target = ProbDist::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let draft = ProbDist::uniform(v);
        let run = |policy: SlCapPolicy| {
            let adapter = SlAdapter::new(AdapterConfig {
                calib_steps: 2,
                ..AdapterConfig::default()
            })
            .unwrap();
            let mut batch = vec![SequenceState::new(
                0,
                vec![],
                80,
                SlController::Dsde(Box::new(adapter)),
                pair(target.clone(), draft.clone()),
                21,
            )];
            run_until_done(&mut batch, &cost(), &policy).unwrap().reports
        };
        let capped = run(SlCapPolicy::mean_mse());
        let uncapped = run(SlCapPolicy::default());
        assert_eq!(capped.len(), uncapped.len());
        for (a, b) in capped.iter().zip(&uncapped) {
            assert_eq!(a.sequences, b.sequences);
            assert_eq!(a.draft_phase_time, b.draft_phase_time);
        }
    }

    #[test]
    fn entropy_stop_bounds() {
        let v = Vocabulary::new(4).unwrap();
        let run = |threshold: f64, draft: ProbDist| {
            let mut batch = vec![SequenceState::new(
                0,
                vec![],
                60,
                SlController::EntropyStop {
                    threshold,
                    base_max_k: 5,
                },
                pair(ProbDist::uniform(v), draft),
                2,
            )];
            run_until_done(&mut batch, &cost(), &SlCapPolicy::default())
                .unwrap()
                .reports
        };
        let uniform = ProbDist::uniform(v);
        for r in run(f64::INFINITY, uniform.clone()) {
            let s = &r.sequences[0];
            assert_eq!(s.proposed_k, 5.min(s.remaining_before - 1));
        }
        for r in run(0.0, uniform) {
            assert!(r.sequences[0].proposed_k <= 1);
        }
        // One-hot drafts have zero entropy and never trip a zero threshold.
        for r in run(0.0, ProbDist::one_hot(v, 1).unwrap()) {
            let s = &r.sequences[0];
            assert_eq!(s.proposed_k, 5.min(s.remaining_before - 1));
        }
    }

    #[test]
    fn global_calibration_shares_sl_max() {
        let v = Vocabulary::new(4).unwrap();
        let cfg = AdapterConfig {
            calib_steps: 3,
            calibration_scope: crate::adapter::CalibrationScope::Global,
            ..AdapterConfig::default()
        };
        let good = pair(ProbDist::uniform(v), ProbDist::uniform(v));
        let bad = pair(
            ProbDist::one_hot(v, 0).unwrap(),
            ProbDist::one_hot(v, 1).unwrap(),
        );
        let mk = |id, models| {
            SequenceState::new(
                id,
                vec![],
                40,
                SlController::Dsde(Box::new(SlAdapter::new(cfg).unwrap())),
                models,
                id as u64,
            )
        };
        let mut batch = vec![mk(0, good), mk(1, bad)];
        for step in 0..3 {
            step_batch(&mut batch, step, &cost(), &SlCapPolicy::default()).unwrap();
        }
        let a = batch[0].adapter().unwrap().sl_max();
        let b = batch[1].adapter().unwrap().sl_max();
        assert!(a.is_some());
        assert_eq!(a, b);
    }
}
