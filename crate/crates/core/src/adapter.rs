//! Training-free speculation-length adapter driven by KL-divergence signals.
//!
//! Each sequence owns an [`SlAdapter`]. It spends its first few speculative
//! steps collecting calibration statistics, which fix the sequence's maximum
//! speculation length:
//!
//! ```text
//! SL_max = SL_A,max * (1 + mean_kld_pre / (max_kld_pre + eps))
//! ```
//!
//! After that, every verification step feeds its per-token divergences into
//! a bounded [`KldHistory`], and the next length is
//!
//! ```text
//! penalty = (exp(2 * mean_kld_last) - 1) * WVIR
//! SL      = (1 - penalty) * (SL_max - SL_min) + SL_min   if penalty <= 1
//!         = SL_min                                       otherwise
//! ```
//!
//! where WVIR is the ratio of the exponentially weighted variance over the
//! short window to the one over the long window.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::KldDirection;
use crate::protocol::VerificationResult;

/// Long-window variance below this is treated as a flat history.
pub const FLAT_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("invalid adapter config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("invalid KLD mean {0}")]
    InvalidKldMean(f64),
    #[error("weighted variance of an empty window")]
    EmptyWindow,
    #[error("adapter state record is malformed: {0}")]
    MalformedState(String),
}

/// What one window slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowUnit {
    /// Every drafted token's divergence is its own observation.
    #[default]
    Token,
    /// One observation per verification step: the mean over its tokens.
    StepMean,
}

/// How the exponential decay weights are indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightIndexing {
    /// `alpha_i = delta^(i-1)` over observations, most recent first.
    #[default]
    PerObservation,
    /// All observations of one verification step share a weight, decaying
    /// by step age.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationScope {
    #[default]
    PerSequence,
    /// Calibration statistics are pooled over the whole batch.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub delta: f64,
    pub n_short: usize,
    pub n_long: usize,
    pub sl_min: usize,
    pub epsilon: f64,
    /// Number of preliminary speculative steps.
    pub calib_steps: usize,
    /// Speculation length used while calibrating.
    pub calib_sl: usize,
    pub window_unit: WindowUnit,
    pub weighting: WeightIndexing,
    pub calibration_scope: CalibrationScope,
    pub kld_direction: KldDirection,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            delta: 0.85,
            n_short: 10,
            n_long: 30,
            sl_min: 2,
            epsilon: 1e-6,
            calib_steps: 5,
            calib_sl: 4,
            window_unit: WindowUnit::Token,
            weighting: WeightIndexing::PerObservation,
            calibration_scope: CalibrationScope::PerSequence,
            kld_direction: KldDirection::TargetDraft,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        let bad = |field, reason: &str| {
            Err(AdapterError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta", "must lie in (0, 1]");
        }
        if self.n_short == 0 {
            return bad("n_short", "must be at least 1");
        }
        if self.n_short >= self.n_long {
            return bad("n_long", "must exceed n_short");
        }
        if self.sl_min == 0 {
            return bad("sl_min", "must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be a positive finite number");
        }
        if self.calib_steps == 0 {
            return bad("calib_steps", "must be at least 1");
        }
        if self.calib_sl == 0 {
            return bad("calib_sl", "must be at least 1");
        }
        Ok(())
    }
}

/// Statistics from the preliminary phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// Most tokens accepted in any single preliminary step.
    pub sl_a_max: usize,
    /// Mean divergence over every preliminary token.
    pub mu_kld_pre: f64,
    /// Largest single divergence observed.
    pub kld_pre_max: f64,
}

/// Running collector for [`CalibrationStats`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationAccumulator {
    pub steps: usize,
    sl_a_max: usize,
    kld_sum: f64,
    kld_count: usize,
    kld_max: f64,
}

impl CalibrationAccumulator {
    pub fn observe(&mut self, klds: &[f64], accepted: usize) {
        self.steps += 1;
        self.sl_a_max = self.sl_a_max.max(accepted);
        for &v in klds {
            self.kld_sum += v;
            self.kld_count += 1;
            self.kld_max = self.kld_max.max(v);
        }
    }

    pub fn merge(&mut self, other: &CalibrationAccumulator) {
        self.steps = self.steps.max(other.steps);
        self.sl_a_max = self.sl_a_max.max(other.sl_a_max);
        self.kld_sum += other.kld_sum;
        self.kld_count += other.kld_count;
        self.kld_max = self.kld_max.max(other.kld_max);
    }

    pub fn stats(&self) -> CalibrationStats {
        CalibrationStats {
            sl_a_max: self.sl_a_max,
            mu_kld_pre: if self.kld_count == 0 {
                0.0
            } else {
                self.kld_sum / self.kld_count as f64
            },
            kld_pre_max: self.kld_max,
        }
    }
}

/// Result of [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sl_max: usize,
    /// Unrounded formula value.
    pub raw: f64,
    /// Nothing was ever accepted during calibration.
    pub degenerate: bool,
}

/// Round half to even, then clamp into `[lo, hi]`.
pub fn round_clamp(value: f64, lo: usize, hi: usize) -> usize {
    let r = value.round_ties_even();
    if !(r >= lo as f64) {
        lo
    } else if r >= hi as f64 {
        hi
    } else {
        r as usize
    }
}

/// Fixes the maximum speculation length from preliminary statistics.
pub fn calibrate(stats: &CalibrationStats, config: &AdapterConfig) -> Calibration {
    let floor = config.sl_min + 1;
    if stats.sl_a_max == 0 {
        return Calibration {
            sl_max: floor,
            raw: 0.0,
            degenerate: true,
        };
    }
    let raw = stats.sl_a_max as f64
        * (1.0 + stats.mu_kld_pre / (stats.kld_pre_max + config.epsilon));
    Calibration {
        sl_max: round_clamp(raw, floor, usize::MAX),
        raw,
        degenerate: false,
    }
}

/// `exp(2 * mu) - 1`, the immediate-disagreement multiplier.
pub fn scale_factor(mu_kld_last: f64) -> Result<f64, AdapterError> {
    if !(mu_kld_last >= 0.0) {
        return Err(AdapterError::InvalidKldMean(mu_kld_last));
    }
    Ok((2.0 * mu_kld_last).exp_m1())
}

/// Exponentially weighted variance of `values` (most recent first) with
/// weights `delta^(i-1)`.
pub fn weighted_variance(values: &[f64], delta: f64) -> Result<f64, AdapterError> {
    let mut alpha = 1.0;
    let weights: Vec<f64> = values
        .iter()
        .map(|_| {
            let w = alpha;
            alpha *= delta;
            w
        })
        .collect();
    weighted_variance_with(values, &weights)
}

/// Weighted population variance with explicit weights.
pub fn weighted_variance_with(values: &[f64], weights: &[f64]) -> Result<f64, AdapterError> {
    if values.is_empty() {
        return Err(AdapterError::EmptyWindow);
    }
    debug_assert_eq!(values.len(), weights.len());
    let total: f64 = weights.iter().sum();
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    Ok(var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Observation {
    value: f64,
    step: u64,
}

/// Bounded, time-ordered record of divergence observations for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KldHistory {
    capacity: usize,
    unit: WindowUnit,
    observations: VecDeque<Observation>,
    last_step_klds: Vec<f64>,
    steps: u64,
}

impl KldHistory {
    pub fn new(config: &AdapterConfig) -> Self {
        Self {
            capacity: config.n_long,
            unit: config.window_unit,
            observations: VecDeque::with_capacity(config.n_long),
            last_step_klds: Vec::new(),
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Verification steps observed so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn last_step_klds(&self) -> &[f64] {
        &self.last_step_klds
    }

    /// Mean divergence of the most recent step, zero before any step.
    pub fn last_step_mean(&self) -> f64 {
        if self.last_step_klds.is_empty() {
            0.0
        } else {
            self.last_step_klds.iter().sum::<f64>() / self.last_step_klds.len() as f64
        }
    }

    /// Values oldest first.
    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.value).collect()
    }

    pub fn observe_step(&mut self, result: &VerificationResult) {
        self.observe_klds(&result.per_token_kld);
    }

    /// Appends one verification step's divergences in position order. An
    /// empty slice is ignored.
    pub fn observe_klds(&mut self, klds: &[f64]) {
        if klds.is_empty() {
            return;
        }
        let step = self.steps;
        self.steps += 1;
        match self.unit {
            WindowUnit::Token => {
                for &value in klds {
                    self.push(Observation { value, step });
                }
            }
            WindowUnit::StepMean => {
                let value = klds.iter().sum::<f64>() / klds.len() as f64;
                self.push(Observation { value, step });
            }
        }
        self.last_step_klds.clear();
        self.last_step_klds.extend_from_slice(klds);
    }

    fn push(&mut self, obs: Observation) {
        if self.observations.len() == self.capacity {
            self.observations.pop_front();
        }
        self.observations.push_back(obs);
    }

    /// The `n` most recent values, most recent first, with their weights.
    fn window(&self, n: usize, delta: f64, weighting: WeightIndexing) -> (Vec<f64>, Vec<f64>) {
        let recent = self.observations.iter().rev().take(n);
        let newest_step = self.observations.back().map_or(0, |o| o.step);
        let mut values = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut alpha = 1.0;
        for obs in recent {
            values.push(obs.value);
            match weighting {
                WeightIndexing::PerObservation => {
                    weights.push(alpha);
                    alpha *= delta;
                }
                WeightIndexing::PerStep => {
                    weights.push(delta.powi((newest_step - obs.step) as i32));
                }
            }
        }
        (values, weights)
    }

    /// Mean over the short window; `None` while warming up.
    pub fn short_window_mean(&self, config: &AdapterConfig) -> Option<f64> {
        if self.observations.len() < config.n_short {
            return None;
        }
        let sum: f64 = self
            .observations
            .iter()
            .rev()
            .take(config.n_short)
            .map(|o| o.value)
            .sum();
        Some(sum / config.n_short as f64)
    }
}

/// A WVIR evaluation with the guard that produced it, if any.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wvir {
    pub value: f64,
    /// Fewer than `n_short` observations: value pinned at 1.
    pub warm_up: bool,
    /// Long-window variance below [`FLAT_VARIANCE`]: value pinned at 1.
    pub flat: bool,
}

/// Short-window over long-window weighted variance.
pub fn wvir(history: &KldHistory, config: &AdapterConfig) -> Wvir {
    if history.len() < config.n_short.max(2) {
        return Wvir {
            value: 1.0,
            warm_up: true,
            flat: false,
        };
    }
    let (short_v, short_w) = history.window(config.n_short, config.delta, config.weighting);
    let (long_v, long_w) = history.window(config.n_long, config.delta, config.weighting);
    let long = weighted_variance_with(&long_v, &long_w).unwrap_or(0.0);
    if long < FLAT_VARIANCE {
        return Wvir {
            value: 1.0,
            warm_up: false,
            flat: true,
        };
    }
    let short = weighted_variance_with(&short_v, &short_w).unwrap_or(0.0);
    Wvir {
        value: short / long,
        warm_up: false,
        flat: false,
    }
}

/// Next-step speculation length decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlDecision {
    pub sl_hat: usize,
    pub sf: f64,
    pub wvir: f64,
    pub penalty: f64,
    /// The penalty exceeded 1 and the length fell back to `sl_min`.
    pub clamped: bool,
    pub warm_up: bool,
    /// Issued during the calibration phase, where the length is fixed.
    pub calibrating: bool,
}

/// Maps a penalty onto `[sl_min, sl_max]`. Penalties above 1 (or NaN) select
/// `sl_min` and report `clamped`.
pub fn sl_from_penalty(penalty: f64, sl_max: usize, sl_min: usize) -> (usize, bool) {
    let sl_max = sl_max.max(sl_min);
    if penalty <= 1.0 {
        let raw = (1.0 - penalty) * (sl_max - sl_min) as f64 + sl_min as f64;
        (round_clamp(raw, sl_min, sl_max), false)
    } else {
        (sl_min, true)
    }
}

/// Pure function of the history: repeated calls agree.
pub fn predict_next_sl(history: &KldHistory, sl_max: usize, config: &AdapterConfig) -> SlDecision {
    // The history only ever holds non-negative divergences.
    let sf = scale_factor(history.last_step_mean()).unwrap_or(f64::INFINITY);
    let w = wvir(history, config);
    let penalty = sf * w.value;
    let (sl_hat, clamped) = sl_from_penalty(penalty, sl_max, config.sl_min);
    SlDecision {
        sl_hat,
        sf,
        wvir: w.value,
        penalty,
        clamped,
        warm_up: w.warm_up,
        calibrating: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Phase {
    Calibrating(CalibrationAccumulator),
    Adaptive {
        stats: CalibrationStats,
        calibration: Calibration,
    },
}

/// Per-sequence adapter state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlAdapter {
    config: AdapterConfig,
    history: KldHistory,
    phase: Phase,
    decision: SlDecision,
}

impl SlAdapter {
    pub fn new(config: AdapterConfig) -> Result<Self, AdapterError> {
        config.validate()?;
        Ok(Self {
            history: KldHistory::new(&config),
            phase: Phase::Calibrating(CalibrationAccumulator::default()),
            decision: calibrating_decision(&config),
            config,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn history(&self) -> &KldHistory {
        &self.history
    }

    /// Length to use for the next step.
    pub fn decision(&self) -> &SlDecision {
        &self.decision
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        match &self.phase {
            Phase::Adaptive { calibration, .. } => Some(calibration),
            Phase::Calibrating(_) => None,
        }
    }

    pub fn sl_max(&self) -> Option<usize> {
        self.calibration().map(|c| c.sl_max)
    }

    /// Preliminary statistics gathered so far, while still calibrating.
    pub fn pending_calibration(&self) -> Option<&CalibrationAccumulator> {
        match &self.phase {
            Phase::Calibrating(acc) => Some(acc),
            Phase::Adaptive { .. } => None,
        }
    }

    /// Calibration steps are complete but the statistics have not been
    /// applied yet (global scope waits for the batch).
    pub fn awaiting_calibration(&self) -> bool {
        self.pending_calibration()
            .is_some_and(|acc| acc.steps >= self.config.calib_steps)
    }

    /// Feeds one verification step into the adapter and refreshes the decision.
    pub fn observe(&mut self, klds: &[f64], accepted: usize) {
        if klds.is_empty() {
            return;
        }
        self.history.observe_klds(klds);
        if let Phase::Calibrating(acc) = &mut self.phase {
            acc.observe(klds, accepted);
            if acc.steps >= self.config.calib_steps
                && self.config.calibration_scope == CalibrationScope::PerSequence
            {
                let stats = acc.stats();
                self.finish_calibration(stats);
                return;
            }
        }
        self.refresh();
    }

    pub fn observe_result(&mut self, result: &VerificationResult) {
        self.observe(&result.per_token_kld, result.accepted_count);
    }

    /// Ends calibration with the given statistics.
    pub fn finish_calibration(&mut self, stats: CalibrationStats) {
        let calibration = calibrate(&stats, &self.config);
        self.phase = Phase::Adaptive { stats, calibration };
        self.refresh();
    }

    fn refresh(&mut self) {
        self.decision = match &self.phase {
            Phase::Calibrating(_) => calibrating_decision(&self.config),
            Phase::Adaptive { calibration, .. } => {
                predict_next_sl(&self.history, calibration.sl_max, &self.config)
            }
        };
    }

    /// Serializes the full state as a single-line JSON record.
    pub fn dump(&self) -> String {
        serde_json::to_string(self).expect("adapter state is always serializable")
    }

    pub fn restore(record: &str) -> Result<Self, AdapterError> {
        let state: Self =
            serde_json::from_str(record).map_err(|e| AdapterError::MalformedState(e.to_string()))?;
        state.config.validate()?;
        Ok(state)
    }
}

fn calibrating_decision(config: &AdapterConfig) -> SlDecision {
    SlDecision {
        sl_hat: config.calib_sl,
        sf: 0.0,
        wvir: 1.0,
        penalty: 0.0,
        clamped: false,
        warm_up: true,
        calibrating: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdapterConfig {
        AdapterConfig::default()
    }

    #[test]
    fn calibrate_reference_values() {
        let c = calibrate(
            &CalibrationStats {
                sl_a_max: 6,
                mu_kld_pre: 0.2,
                kld_pre_max: 0.5,
            },
            &cfg(),
        );
        assert!((c.raw - 8.399_995_200_009_6).abs() < 1e-9, "{}", c.raw);
        assert_eq!(c.sl_max, 8);
        assert!(!c.degenerate);

        let zero = calibrate(
            &CalibrationStats {
                sl_a_max: 6,
                mu_kld_pre: 0.0,
                kld_pre_max: 0.0,
            },
            &cfg(),
        );
        assert_eq!(zero.sl_max, 6);

        let constant = calibrate(
            &CalibrationStats {
                sl_a_max: 5,
                mu_kld_pre: 0.4,
                kld_pre_max: 0.4,
            },
            &cfg(),
        );
        assert!((constant.raw - 10.0).abs() < 1e-4);
        assert_eq!(constant.sl_max, 10);
    }

    #[test]
    fn degenerate_calibration() {
        let c = calibrate(&CalibrationStats::default(), &cfg());
        assert!(c.degenerate);
        assert_eq!(c.sl_max, 3);
    }

    #[test]
    fn scale_factor_values() {
        assert_eq!(scale_factor(0.0).unwrap(), 0.0);
        assert!((scale_factor(0.5).unwrap() - 1.718_281_828_459_045).abs() < 1e-12);
        assert!((scale_factor(1.0).unwrap() - 6.389_056_098_930_65).abs() < 1e-12);
        assert!(matches!(scale_factor(-0.1), Err(AdapterError::InvalidKldMean(_))));
    }

    #[test]
    fn weighted_variance_values() {
        assert_eq!(weighted_variance(&[0.3, 0.3, 0.3], 0.85).unwrap(), 0.0);
        let v = weighted_variance(&[2.0, 1.0], 0.5).unwrap();
        assert!((v - 2.0 / 9.0).abs() < 1e-15);
        let v = weighted_variance(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(weighted_variance(&[], 0.5), Err(AdapterError::EmptyWindow));
    }

    #[test]
    fn history_ring_semantics() {
        let mut h = KldHistory::new(&cfg());
        h.observe_klds(&[0.1, 0.2, 0.3]);
        assert_eq!(h.len(), 3);
        let mut h = KldHistory::new(&cfg());
        for i in 0..6 {
            h.observe_klds(&[i as f64; 5]);
        }
        assert_eq!(h.len(), 30);
        h.observe_klds(&[9.0; 5]);
        assert_eq!(h.len(), 30);
        assert_eq!(h.values()[0], 1.0);
        assert_eq!(h.last_step_klds(), &[9.0; 5]);
        h.observe_klds(&[7.0, 8.0]);
        assert_eq!(h.last_step_klds(), &[7.0, 8.0]);
    }

    #[test]
    fn wvir_guards() {
        let c = cfg();
        let mut h = KldHistory::new(&c);
        h.observe_klds(&[0.5]);
        assert!(wvir(&h, &c).warm_up);
        h.observe_klds(&[0.5; 20]);
        let w = wvir(&h, &c);
        assert!(w.flat && w.value == 1.0);

        // Exactly n_short observations: both windows hold the same values.
        let mut h = KldHistory::new(&c);
        h.observe_klds(&[0.1, 0.4, 0.2, 0.8, 0.3, 0.9, 0.0, 0.5, 0.6, 0.7]);
        assert_eq!(wvir(&h, &c).value, 1.0);
    }

    #[test]
    fn wvir_detects_recent_stability() {
        let c = cfg();
        let mut h = KldHistory::new(&c);
        for i in 0..30 {
            h.observe_klds(&[if i % 2 == 0 { 0.1 } else { 0.9 }]);
        }
        for _ in 0..10 {
            h.observe_klds(&[0.5]);
        }
        // Long window: 20 alternating values then 10 constants; short window flat.
        let w = wvir(&h, &c);
        assert!(w.value < 1.0);
        assert_eq!(w.value, 0.0);
    }

    #[test]
    fn penalty_branches() {
        assert_eq!(sl_from_penalty(0.0, 8, 2), (8, false));
        assert_eq!(sl_from_penalty(1.0, 8, 2), (2, false));
        assert_eq!(sl_from_penalty(1.0 + f64::EPSILON, 8, 2), (2, true));
        assert_eq!(sl_from_penalty(f64::NAN, 8, 2), (2, true));
        assert_eq!(sl_from_penalty(0.5, 8, 2), (5, false));
        // 0.75 * 6 + 2 = 6.5 rounds to even.
        assert_eq!(sl_from_penalty(0.25, 8, 2), (6, false));
    }

    #[test]
    fn predict_zero_kld_hits_max() {
        let c = cfg();
        let mut h = KldHistory::new(&c);
        h.observe_klds(&[0.0; 4]);
        let d = predict_next_sl(&h, 9, &c);
        assert_eq!(d.sl_hat, 9);
        assert_eq!(d.penalty, 0.0);
        assert_eq!(d, predict_next_sl(&h, 9, &c));
    }

    #[test]
    fn predict_large_kld_clamps() {
        let c = cfg();
        let mut h = KldHistory::new(&c);
        h.observe_klds(&[2.0; 4]);
        let d = predict_next_sl(&h, 9, &c);
        assert_eq!(d.sl_hat, 2);
        assert!(d.clamped);
    }

    #[test]
    fn adapter_calibrates_then_adapts() {
        let c = AdapterConfig {
            calib_steps: 2,
            ..cfg()
        };
        let mut a = SlAdapter::new(c).unwrap();
        assert_eq!(a.decision().sl_hat, 4);
        assert!(a.decision().calibrating);
        a.observe(&[0.1, 0.2, 0.3, 0.4], 3);
        assert!(a.decision().calibrating);
        a.observe(&[0.0, 0.0, 0.0, 0.0], 4);
        // mu = 0.125, max = 0.4: 4 * (1 + 0.3125) = 5.25 -> 5
        assert_eq!(a.sl_max(), Some(5));
        assert!(!a.decision().calibrating);
        assert_eq!(a.decision().sl_hat, 5);
    }

    #[test]
    fn global_scope_waits_for_batch() {
        let c = AdapterConfig {
            calib_steps: 1,
            calibration_scope: CalibrationScope::Global,
            ..cfg()
        };
        let mut a = SlAdapter::new(c).unwrap();
        a.observe(&[0.1], 1);
        assert!(a.awaiting_calibration());
        assert!(a.decision().calibrating);
        a.finish_calibration(CalibrationStats {
            sl_a_max: 4,
            mu_kld_pre: 0.0,
            kld_pre_max: 0.0,
        });
        assert_eq!(a.sl_max(), Some(4));
    }

    #[test]
    fn dump_restore_round_trip() {
        let mut a = SlAdapter::new(AdapterConfig {
            calib_steps: 1,
            ..cfg()
        })
        .unwrap();
        a.observe(&[0.3, 0.1], 2);
        a.observe(&[0.2, 0.05, 0.4], 1);
        let mut b = SlAdapter::restore(&a.dump()).unwrap();
        assert_eq!(a, b);
        a.observe(&[0.7], 0);
        b.observe(&[0.7], 0);
        assert_eq!(a.decision(), b.decision());
        assert!(SlAdapter::restore("{").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = AdapterConfig { delta: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = AdapterConfig {
            n_short: 30,
            ..cfg()
        };
        assert!(matches!(
            bad.validate(),
            Err(AdapterError::InvalidConfig { field: "n_long", .. })
        ));
    }

    #[test]
    fn step_mean_windows() {
        let c = AdapterConfig {
            window_unit: WindowUnit::StepMean,
            ..cfg()
        };
        let mut h = KldHistory::new(&c);
        h.observe_klds(&[0.2, 0.4]);
        h.observe_klds(&[1.0]);
        assert_eq!(h.values(), vec![0.30000000000000004, 1.0]);
    }

    #[test]
    fn per_step_weights_share_step_weight() {
        let c = AdapterConfig {
            weighting: WeightIndexing::PerStep,
            delta: 0.5,
            ..cfg()
        };
        let mut h = KldHistory::new(&c);
        h.observe_klds(&[1.0, 1.0]);
        h.observe_klds(&[3.0, 3.0]);
        let (v, w) = h.window(4, 0.5, WeightIndexing::PerStep);
        assert_eq!(v, vec![3.0, 3.0, 1.0, 1.0]);
        assert_eq!(w, vec![1.0, 1.0, 0.5, 0.5]);
    }
}
