//! Run-level accounting and signal-versus-acceptance correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::adapter::{wvir, AdapterConfig, AdapterError, KldHistory};
use crate::engine::StepReport;
use crate::workloads::SignalTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("zero variance")]
    ZeroVariance,
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("trace is shorter than the signal warm-up")]
    TraceTooShort,
    #[error("batch sizes must be positive and strictly ascending")]
    BadBatchSizes,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Totals for one run. `total_steps` counts per-sequence verification
/// passes, so block efficiency is tokens per sequence-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub total_emitted_tokens: usize,
    pub total_steps: usize,
    /// Synchronized batch steps.
    pub batch_steps: usize,
    /// Simulated seconds.
    pub simulated_time: f64,
    pub block_efficiency: f64,
    /// Accepted over drafted tokens; zero when nothing was drafted.
    pub acceptance_rate: f64,
    /// Emitted tokens per simulated second.
    pub throughput: f64,
    /// Mean simulated completion time over sequences.
    pub mean_latency: f64,
    /// Widest proposal of each batch step.
    pub per_step_sl: Vec<usize>,
}

impl RunMetrics {
    /// Every field derives from the step log alone.
    pub fn from_reports(reports: &[StepReport]) -> Self {
        let mut emitted = 0;
        let mut steps = 0;
        let mut proposed = 0;
        let mut accepted = 0;
        let mut time = 0.0;
        let mut completion_sum = 0.0;
        let mut completed = 0usize;
        let mut per_step_sl = Vec::with_capacity(reports.len());
        for r in reports {
            time += r.draft_phase_time + r.verify_phase_time;
            per_step_sl.push(r.max_k());
            for s in &r.sequences {
                steps += 1;
                emitted += s.emitted.len();
                proposed += s.proposed_k;
                accepted += s.accepted;
                if s.emitted.len() == s.remaining_before {
                    completion_sum += time;
                    completed += 1;
                }
            }
        }
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        Self {
            total_emitted_tokens: emitted,
            total_steps: steps,
            batch_steps: reports.len(),
            simulated_time: time,
            block_efficiency: ratio(emitted as f64, steps as f64),
            acceptance_rate: ratio(accepted as f64, proposed as f64),
            throughput: ratio(emitted as f64, time),
            mean_latency: ratio(completion_sum, completed as f64),
            per_step_sl,
        }
    }
}

/// `baseline / run` in simulated time.
pub fn speedup(run: &RunMetrics, baseline: &RunMetrics) -> f64 {
    baseline.simulated_time / run.simulated_time
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value for `r` under the t approximation with `n - 2` degrees
/// of freedom.
pub fn pearson_p_value(r: f64, n: usize) -> Option<f64> {
    if n < 3 {
        return None;
    }
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return Some(0.0);
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(2.0 * (1.0 - dist.cdf(t.abs())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Draft entropy at the token's own position.
    Entropy,
    /// Mean divergence over the short window, before the current step.
    MeanKld,
    /// WVIR before the current step.
    Wvir,
}

impl Signal {
    pub const ALL: [Signal; 3] = [Signal::Entropy, Signal::MeanKld, Signal::Wvir];

    pub fn name(self) -> &'static str {
        match self {
            Signal::Entropy => "entropy",
            Signal::MeanKld => "mean_kld",
            Signal::Wvir => "wvir",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub signal: Signal,
    pub pearson_r: f64,
    pub n: usize,
    pub p_value: Option<f64>,
    /// One side had zero variance; `pearson_r` is reported as 0.
    pub degenerate: bool,
}

/// Token-aligned (signal, acceptance) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalSamples {
    pub entropy: (Vec<f64>, Vec<f64>),
    pub mean_kld: (Vec<f64>, Vec<f64>),
    pub wvir: (Vec<f64>, Vec<f64>),
}

impl SignalSamples {
    fn column(&self, signal: Signal) -> &(Vec<f64>, Vec<f64>) {
        match signal {
            Signal::Entropy => &self.entropy,
            Signal::MeanKld => &self.mean_kld,
            Signal::Wvir => &self.wvir,
        }
    }

    /// Adds one sequence's trace. Only positions the verifier actually
    /// evaluated contribute (the accepted prefix plus the first rejection).
    /// Lagging signals come from the same window machinery as the adapter
    /// and are skipped until the short window is full.
    pub fn extend_from_trace(&mut self, trace: &SignalTrace, config: &AdapterConfig) {
        let mut history = KldHistory::new(config);
        for record in &trace.records {
            let lagging = history
                .short_window_mean(config)
                .map(|mean| (mean, wvir(&history, config).value));
            let evaluated = (record.accepted_count() + 1).min(record.accepted.len());
            for j in 0..evaluated {
                let outcome = if record.accepted[j] { 1.0 } else { 0.0 };
                self.entropy.0.push(record.entropy[j]);
                self.entropy.1.push(outcome);
                if let Some((mean, w)) = lagging {
                    self.mean_kld.0.push(mean);
                    self.mean_kld.1.push(outcome);
                    self.wvir.0.push(w);
                    self.wvir.1.push(outcome);
                }
            }
            history.observe_klds(&record.kld);
        }
    }

    pub fn reports(&self) -> Result<Vec<CorrelationReport>, MetricsError> {
        if self.mean_kld.0.len() < 2 {
            return Err(MetricsError::TraceTooShort);
        }
        Signal::ALL
            .iter()
            .map(|&signal| {
                let (x, y) = self.column(signal);
                let n = x.len();
                match pearson(x, y) {
                    Ok(r) => Ok(CorrelationReport {
                        signal,
                        pearson_r: r,
                        n,
                        p_value: pearson_p_value(r, n),
                        degenerate: false,
                    }),
                    Err(MetricsError::ZeroVariance) => Ok(CorrelationReport {
                        signal,
                        pearson_r: 0.0,
                        n,
                        p_value: None,
                        degenerate: true,
                    }),
                    Err(e) => Err(e),
                }
            })
            .collect()
    }
}

/// Correlation of each signal with token acceptance over one trace.
pub fn correlation_analysis(
    trace: &SignalTrace,
    config: &AdapterConfig,
) -> Result<Vec<CorrelationReport>, MetricsError> {
    correlation_analysis_many(std::slice::from_ref(trace), config)
}

/// Pools samples from several sequences' traces.
pub fn correlation_analysis_many(
    traces: &[SignalTrace],
    config: &AdapterConfig,
) -> Result<Vec<CorrelationReport>, MetricsError> {
    config.validate()?;
    let mut samples = SignalSamples::default();
    for trace in traces {
        samples.extend_from_trace(trace, config);
    }
    samples.reports()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub batch_size: usize,
    pub throughput: f64,
    /// Throughput relative to batch size 1.
    pub ratio: f64,
}

/// Runs `scenario` at each batch size and reports throughput scaling
/// against batch size 1 (run separately if absent from the list).
pub fn throughput_scaling<E, F>(batch_sizes: &[usize], mut scenario: F) -> Result<Vec<ScalingPoint>, E>
where
    E: From<MetricsError>,
    F: FnMut(usize) -> Result<RunMetrics, E>,
{
    if batch_sizes.is_empty()
        || batch_sizes[0] == 0
        || batch_sizes.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(MetricsError::BadBatchSizes.into());
    }
    let mut results = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        results.push((b, scenario(b)?.throughput));
    }
    let base = match results.first() {
        Some(&(1, t)) => t,
        _ => scenario(1)?.throughput,
    };
    Ok(results
        .into_iter()
        .map(|(batch_size, throughput)| ScalingPoint {
            batch_size,
            throughput,
            ratio: throughput / base,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SequenceStep;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 4]), Err(MetricsError::ZeroVariance));
        assert_eq!(pearson(&x, &[1.0; 3]), Err(MetricsError::LengthMismatch(4, 3)));
    }

    #[test]
    fn p_value_sanity() {
        assert!(pearson_p_value(0.0, 100).unwrap() > 0.99);
        assert!(pearson_p_value(0.5, 100).unwrap() < 1e-6);
        assert_eq!(pearson_p_value(0.5, 2), None);
    }

    fn entry(remaining_before: usize, k: usize, accepted: usize) -> SequenceStep {
        SequenceStep {
            seq_id: 0,
            remaining_before,
            predicted_sl: k,
            proposed_k: k,
            accepted,
            emitted: vec![0; accepted + 1],
            next_sl: k,
            kld: vec![0.0; k],
            entropy: vec![0.0; k],
        }
    }

    #[test]
    fn metrics_from_reports() {
        let reports = vec![
            StepReport {
                step_index: 0,
                sl_cap_applied: None,
                draft_phase_time: 0.3,
                verify_phase_time: 1.0,
                sequences: vec![entry(6, 3, 3)],
            },
            StepReport {
                step_index: 1,
                sl_cap_applied: None,
                draft_phase_time: 0.1,
                verify_phase_time: 1.0,
                sequences: vec![entry(2, 1, 1)],
            },
        ];
        let m = RunMetrics::from_reports(&reports);
        assert_eq!(m.total_emitted_tokens, 6);
        assert_eq!(m.total_steps, 2);
        assert_eq!(m.block_efficiency, 3.0);
        assert_eq!(m.acceptance_rate, 1.0);
        assert!((m.simulated_time - 2.4).abs() < 1e-12);
        assert_eq!(m.mean_latency, m.simulated_time);
        assert_eq!(m.per_step_sl, vec![3, 1]);
        assert_eq!(speedup(&m, &m), 1.0);
    }

    #[test]
    fn scaling_rejects_unordered_sizes() {
        let run = |_b: usize| -> Result<RunMetrics, MetricsError> { unreachable!() };
        assert_eq!(
            throughput_scaling(&[2, 1], run).unwrap_err(),
            MetricsError::BadBatchSizes
        );
    }
}
