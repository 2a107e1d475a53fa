use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::{config_error, engine_error, workload_error, ExperimentConfig, PolicySpec, SlotSeeding};
use super::ExperimentError;
use crate::adapter::{SlAdapter, SlDecision};
use crate::dist::{RandomSource, TokenId};
use crate::engine::{run_until_done, CapMode, ModelPair, SequenceState, SlCapPolicy, SlController, StepReport};
use crate::metrics::{
    correlation_analysis, correlation_analysis_many, throughput_scaling, CorrelationReport,
    MetricsError, RunMetrics, ScalingPoint,
};
use crate::workloads::{format_trace, gen_pair, load_trace, replay_adapter, SignalTrace, TraceError};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

const SLOT_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
const PROMPT_STREAM: u64 = 0x5EED_0000_0000_0001;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_files(dir: &Path, files: &[(&str, String)]) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    for (name, content) in files {
        let path = dir.join(name);
        fs::write(&path, content).map_err(io_error(&path))?;
    }
    Ok(())
}

fn trace_error(e: TraceError) -> ExperimentError {
    match e {
        TraceError::Io { path, source } => ExperimentError::Io { path, source },
        TraceError::Malformed { line, reason } => {
            config_error("workload.trace", format!("line {line}: {reason}"))
        }
        TraceError::Adapter(e) => super::config::adapter_error(e),
    }
}

fn metrics_error(e: MetricsError) -> ExperimentError {
    match e {
        MetricsError::TraceTooShort => config_error(
            "workload",
            "not enough verification steps to populate the lagging windows",
        ),
        MetricsError::BadBatchSizes => config_error("--batch-sizes", e.to_string()),
        MetricsError::Adapter(e) => super::config::adapter_error(e),
        other => ExperimentError::Invariant(other.to_string()),
    }
}

fn slot_seed(seed: u64, slot: usize) -> u64 {
    seed ^ (slot as u64).wrapping_mul(SLOT_STRIDE)
}

fn controller(config: &ExperimentConfig) -> Result<SlController, ExperimentError> {
    Ok(match &config.policy {
        PolicySpec::Autoregressive => SlController::Autoregressive,
        PolicySpec::Static { k } => SlController::Static { k: *k },
        PolicySpec::EntropyStop {
            threshold,
            base_max_k,
        } => SlController::EntropyStop {
            threshold: *threshold,
            base_max_k: *base_max_k,
        },
        PolicySpec::Dsde { .. } => SlController::Dsde(Box::new(
            SlAdapter::new(config.adapter).map_err(super::config::adapter_error)?,
        )),
        PolicySpec::StaticOptSweep { .. } => {
            return Err(config_error(
                "policy.kind",
                "static_opt_sweep runs through the sweep subcommand",
            ))
        }
    })
}

fn cap_policy(config: &ExperimentConfig) -> SlCapPolicy {
    let mode = match config.policy {
        PolicySpec::Dsde { cap } => cap,
        _ => CapMode::None,
    };
    SlCapPolicy {
        mode,
        sl_min: config.adapter.sl_min,
        ..SlCapPolicy::default()
    }
}

/// Builds the sequences of a synthetic run. Slot `i` decodes pair
/// `i % pairs.len()` with its own prompt and sampling seed.
pub fn build_batch(config: &ExperimentConfig) -> Result<Vec<SequenceState>, ExperimentError> {
    config.validate()?;
    if config.workload.trace.is_some() {
        return Err(config_error(
            "workload.trace",
            "trace workloads are analysis-only; use correlate",
        ));
    }
    let pairs: Vec<Arc<ModelPair>> = config
        .workload
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            gen_pair(p)
                .map(|pair| Arc::new(pair.into_model_pair()))
                .map_err(|e| workload_error(i, e))
        })
        .collect::<Result<_, _>>()?;

    let mut batch = Vec::with_capacity(config.batch_size);
    for slot in 0..config.batch_size {
        let source = match config.workload.slot_seeding {
            SlotSeeding::Distinct => slot,
            SlotSeeding::Identical => 0,
        };
        let pair_index = source % pairs.len();
        let pair_config = &config.workload.pairs[pair_index];
        let seed = slot_seed(config.seed, source);
        let mut prompt_rng = RandomSource::new(seed ^ PROMPT_STREAM);
        let prompt_len = 1 + (source * config.workload.prompt_stagger) % pair_config.cycle_len();
        let prompt: Vec<TokenId> = (0..prompt_len)
            .map(|_| prompt_rng.below(pair_config.vocab_size) as TokenId)
            .collect();
        batch.push(SequenceState::new(
            slot,
            prompt,
            config.budget_per_sequence,
            controller(config)?,
            Arc::clone(&pairs[pair_index]),
            seed,
        ));
    }
    Ok(batch)
}

/// Everything a single-policy run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub metrics: RunMetrics,
    pub reports: Vec<StepReport>,
    /// Per-slot signal traces, in slot order.
    pub traces: Vec<SignalTrace>,
    pub generated: Vec<Vec<TokenId>>,
}

impl RunOutput {
    pub fn label(&self) -> String {
        self.config.policy.to_string()
    }

    /// Contents of the run directory, by file name.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            (CONFIG_FILE, self.config.to_toml()),
            (METRICS_FILE, metrics_csv(&self.label(), &self.config, &self.metrics)),
            (STEPS_FILE, step_log(&self.reports)),
            (SUMMARY_FILE, summary(&self.config, &self.metrics)),
        ]
    }
}

/// Runs one policy without touching the file system.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    let mut batch = build_batch(config)?;
    let outcome = run_until_done(&mut batch, &config.cost, &cap_policy(config)).map_err(engine_error)?;
    let emitted: usize = batch.iter().map(|s| s.generated().len()).sum();
    if emitted != config.batch_size * config.budget_per_sequence
        || emitted != outcome.metrics.total_emitted_tokens
    {
        return Err(ExperimentError::Invariant(format!(
            "emitted {emitted} tokens for a budget of {} per sequence",
            config.budget_per_sequence
        )));
    }
    Ok(RunOutput {
        config: ExperimentConfig {
            output_dir: None,
            ..config.clone()
        },
        metrics: outcome.metrics,
        reports: outcome.reports,
        traces: batch.iter().map(|s| s.trace.clone()).collect(),
        generated: batch.iter().map(|s| s.generated().to_vec()).collect(),
    })
}

/// Runs one policy and writes its directory (config echo, metrics table,
/// step log, summary) under `out`, or under the config's own output
/// directory when `out` is `None`.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput, ExperimentError> {
    let run = execute(config)?;
    if let Some(dir) = out.or(config.output_dir.as_deref()) {
        write_files(dir, &run.files())?;
    }
    Ok(run)
}

pub const METRICS_HEADER: &str = "policy,batch_size,budget_per_sequence,total_emitted_tokens,total_steps,batch_steps,simulated_time,block_efficiency,acceptance_rate,throughput,mean_latency,c_draft,c_verify_base,c_verify_per_token";

pub fn metrics_csv(label: &str, config: &ExperimentConfig, m: &RunMetrics) -> String {
    format!(
        "{METRICS_HEADER}\n{label},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        config.batch_size,
        config.budget_per_sequence,
        m.total_emitted_tokens,
        m.total_steps,
        m.batch_steps,
        m.simulated_time,
        m.block_efficiency,
        m.acceptance_rate,
        m.throughput,
        m.mean_latency,
        config.cost.c_draft,
        config.cost.c_verify_base,
        config.cost.c_verify_per_token,
    )
}

/// One JSON object per batch step.
pub fn step_log(reports: &[StepReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("step report serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_step_log(text: &str) -> Result<Vec<StepReport>, ExperimentError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                ExperimentError::Invariant(format!("{STEPS_FILE} line {}: {e}", i + 1))
            })
        })
        .collect()
}

fn summary(config: &ExperimentConfig, m: &RunMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "policy: {}", config.policy);
    let _ = writeln!(s, "workload_key: {}", config.workload_key());
    let _ = writeln!(s, "seed: {}", config.seed);
    let _ = writeln!(s, "batch_size: {}", config.batch_size);
    let _ = writeln!(s, "budget_per_sequence: {}", config.budget_per_sequence);
    let _ = writeln!(
        s,
        "cost (simulated seconds): c_draft={} c_verify_base={} c_verify_per_token={}",
        config.cost.c_draft, config.cost.c_verify_base, config.cost.c_verify_per_token
    );
    let _ = writeln!(s, "emitted tokens: {}", m.total_emitted_tokens);
    let _ = writeln!(s, "verification steps: {} ({} batch steps)", m.total_steps, m.batch_steps);
    let _ = writeln!(s, "simulated time: {}", m.simulated_time);
    let _ = writeln!(s, "mean latency: {}", m.mean_latency);
    let _ = writeln!(s, "block efficiency: {}", m.block_efficiency);
    let _ = writeln!(s, "acceptance rate: {}", m.acceptance_rate);
    let _ = writeln!(s, "throughput: {}", m.throughput);
    s
}

/// Result of a static-length sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<(usize, RunMetrics)>,
    /// Fastest k; the earliest listed wins ties.
    pub best_k: usize,
}

/// Profiles each static length in parallel. With `out`, each k gets its
/// own run directory `k<k>/` and the table goes to `sweep.csv`.
pub fn sweep(config: &ExperimentConfig, ks: &[usize], out: Option<&Path>) -> Result<SweepOutcome, ExperimentError> {
    let spec = PolicySpec::StaticOptSweep { ks: ks.to_vec() };
    spec.validate()?;
    let runs: Vec<Result<RunOutput, ExperimentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ks
            .iter()
            .map(|&k| {
                let cfg = config.with_policy(PolicySpec::Static { k });
                let dir = out.map(|d| d.join(format!("k{k}")));
                scope.spawn(move || run_experiment(&cfg, dir.as_deref()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(ks.len());
    for (&k, run) in ks.iter().zip(runs) {
        rows.push((k, run?.metrics));
    }
    let best_k = rows
        .iter()
        .fold(None::<&(usize, RunMetrics)>, |best, row| match best {
            Some(b) if b.1.simulated_time <= row.1.simulated_time => Some(b),
            _ => Some(row),
        })
        .map(|row| row.0)
        .expect("non-empty sweep");
    let outcome = SweepOutcome { rows, best_k };
    if let Some(dir) = out {
        write_files(dir, &[("sweep.csv", sweep_csv(&outcome))])?;
    }
    Ok(outcome)
}

pub fn sweep_csv(outcome: &SweepOutcome) -> String {
    let mut s = String::from("k,simulated_time,block_efficiency,acceptance_rate,throughput,mean_latency,best\n");
    for (k, m) in &outcome.rows {
        let _ = writeln!(
            s,
            "{k},{},{},{},{},{},{}",
            m.simulated_time,
            m.block_efficiency,
            m.acceptance_rate,
            m.throughput,
            m.mean_latency,
            u8::from(*k == outcome.best_k)
        );
    }
    s
}

/// Runs the config at each batch size (directories `b<size>/`) and
/// writes `scaling.csv`.
pub fn scaling(
    config: &ExperimentConfig,
    batch_sizes: &[usize],
    out: Option<&Path>,
) -> Result<Vec<(ScalingPoint, RunMetrics)>, ExperimentError> {
    let mut runs: Vec<(usize, RunMetrics)> = Vec::new();
    let points = throughput_scaling(batch_sizes, |b| {
        let cfg = ExperimentConfig {
            batch_size: b,
            ..config.clone()
        };
        let dir = out.filter(|_| batch_sizes.contains(&b)).map(|d| d.join(format!("b{b}")));
        let metrics = run_experiment(&cfg, dir.as_deref())?.metrics;
        runs.push((b, metrics.clone()));
        Ok::<_, ExperimentError>(metrics)
    })?;
    let rows: Vec<(ScalingPoint, RunMetrics)> = points
        .into_iter()
        .map(|p| {
            let m = runs
                .iter()
                .find(|(b, _)| *b == p.batch_size)
                .map(|(_, m)| m.clone())
                .expect("every point was run");
            (p, m)
        })
        .collect();
    if let Some(dir) = out {
        let mut s = String::from("batch_size,throughput,ratio,simulated_time,mean_latency\n");
        for (p, m) in &rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.batch_size, p.throughput, p.ratio, m.simulated_time, m.mean_latency
            );
        }
        write_files(dir, &[("scaling.csv", s)])?;
    }
    Ok(rows)
}

impl From<MetricsError> for ExperimentError {
    fn from(e: MetricsError) -> Self {
        metrics_error(e)
    }
}

/// Signal correlations, computed either from a recorded trace or from the
/// live traces of a synthetic run.
#[derive(Debug, Clone)]
pub struct CorrelateOutcome {
    pub reports: Vec<CorrelationReport>,
    pub run: Option<RunOutput>,
    /// Adapter decisions replayed over a recorded trace.
    pub decisions: Vec<SlDecision>,
}

pub fn correlation_csv(reports: &[CorrelationReport]) -> String {
    let mut s = String::from("signal,pearson_r,n,p_value,degenerate\n");
    for r in reports {
        let p = r.p_value.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.signal.name(),
            r.pearson_r,
            r.n,
            p,
            u8::from(r.degenerate)
        );
    }
    s
}

fn decisions_csv(decisions: &[SlDecision]) -> String {
    let mut s = String::from("step,sl_hat,sf,wvir,penalty,clamped,warm_up,calibrating\n");
    for (i, d) in decisions.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{},{}",
            d.sl_hat,
            d.sf,
            d.wvir,
            d.penalty,
            u8::from(d.clamped),
            u8::from(d.warm_up),
            u8::from(d.calibrating)
        );
    }
    s
}

/// Writes `correlation.csv`. Synthetic runs also write their run
/// directory and one trace per slot under `traces/`; trace workloads add
/// the replayed adapter decisions as `decisions.csv`.
pub fn correlate(config: &ExperimentConfig, out: Option<&Path>) -> Result<CorrelateOutcome, ExperimentError> {
    config.validate()?;
    let outcome = if let Some(path) = &config.workload.trace {
        let trace = load_trace(path).map_err(trace_error)?;
        let reports = correlation_analysis(&trace, &config.adapter)?;
        let decisions = replay_adapter(&trace, &config.adapter).map_err(trace_error)?;
        CorrelateOutcome {
            reports,
            run: None,
            decisions,
        }
    } else {
        let run = execute(config)?;
        let reports = correlation_analysis_many(&run.traces, &config.adapter)?;
        CorrelateOutcome {
            reports,
            run: Some(run),
            decisions: Vec::new(),
        }
    };
    if let Some(dir) = out {
        let mut files = vec![("correlation.csv", correlation_csv(&outcome.reports))];
        if let Some(run) = &outcome.run {
            files.extend(run.files());
            let traces_dir = dir.join("traces");
            let traces: Vec<(String, String)> = run
                .traces
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("seq_{i:03}.csv"), format_trace(t)))
                .collect();
            let named: Vec<(&str, String)> = traces.iter().map(|(n, c)| (n.as_str(), c.clone())).collect();
            write_files(&traces_dir, &named)?;
        } else {
            files.push(("decisions.csv", decisions_csv(&outcome.decisions)));
        }
        write_files(dir, &files)?;
    }
    Ok(outcome)
}

/// Re-executes the run recorded in `dir` from its config echo and checks
/// every output file byte for byte. Returns the verified file names.
pub fn replay(dir: &Path) -> Result<Vec<&'static str>, ExperimentError> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let run = execute(&config)?;
    let mut verified = Vec::new();
    for (name, expected) in run.files() {
        let path = dir.join(name);
        let on_disk = fs::read(&path).map_err(io_error(&path))?;
        if on_disk != expected.as_bytes() {
            return Err(ExperimentError::Invariant(format!(
                "replay of {} differs in {name}",
                dir.display()
            )));
        }
        verified.push(name);
    }
    Ok(verified)
}

/// One run entering a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparedRun {
    pub label: String,
    pub workload_key: String,
    pub autoregressive: bool,
    pub metrics: RunMetrics,
}

impl ComparedRun {
    pub fn from_run(run: &RunOutput) -> Self {
        Self {
            label: run.label(),
            workload_key: run.config.workload_key(),
            autoregressive: run.config.policy == PolicySpec::Autoregressive,
            metrics: run.metrics.clone(),
        }
    }

    /// Rebuilds a run from its directory; metrics are recomputed from the
    /// step log.
    pub fn load(dir: &Path) -> Result<Self, ExperimentError> {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let steps_path = dir.join(STEPS_FILE);
        let text = fs::read_to_string(&steps_path).map_err(io_error(&steps_path))?;
        let reports = parse_step_log(&text)?;
        Ok(Self {
            label: config.policy.to_string(),
            workload_key: config.workload_key(),
            autoregressive: config.policy == PolicySpec::Autoregressive,
            metrics: RunMetrics::from_reports(&reports),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub simulated_time: f64,
    pub mean_latency: f64,
    pub block_efficiency: f64,
    pub acceptance_rate: f64,
    /// Against the autoregressive run, or the first run when there is none.
    pub speedup: f64,
}

pub fn compare_report(runs: &[ComparedRun]) -> Result<Vec<ComparisonRow>, ExperimentError> {
    let first = runs
        .first()
        .ok_or_else(|| config_error("runs", "nothing to compare"))?;
    if let Some(other) = runs.iter().find(|r| r.workload_key != first.workload_key) {
        return Err(config_error(
            "workload",
            format!("`{}` and `{}` ran different workloads", first.label, other.label),
        ));
    }
    let baseline = runs.iter().find(|r| r.autoregressive).unwrap_or(first);
    Ok(runs
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            simulated_time: r.metrics.simulated_time,
            mean_latency: r.metrics.mean_latency,
            block_efficiency: r.metrics.block_efficiency,
            acceptance_rate: r.metrics.acceptance_rate,
            speedup: crate::metrics::speedup(&r.metrics, &baseline.metrics),
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("policy,simulated_time,mean_latency,block_efficiency,acceptance_rate,speedup\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.label, r.simulated_time, r.mean_latency, r.block_efficiency, r.acceptance_rate, r.speedup
        );
    }
    s
}

/// Runs each policy on the same workload (directories named by policy
/// slug) and writes `comparison.csv`.
pub fn compare_policies(
    config: &ExperimentConfig,
    policies: &[PolicySpec],
    out: Option<&Path>,
) -> Result<Vec<ComparisonRow>, ExperimentError> {
    let mut runs = Vec::with_capacity(policies.len());
    for policy in policies {
        let dir: Option<PathBuf> = out.map(|d| d.join(policy.slug()));
        let run = run_experiment(&config.with_policy(policy.clone()), dir.as_deref())?;
        runs.push(ComparedRun::from_run(&run));
    }
    let rows = compare_report(&runs)?;
    if let Some(dir) = out {
        write_files(dir, &[("comparison.csv", comparison_csv(&rows))])?;
    }
    Ok(rows)
}
