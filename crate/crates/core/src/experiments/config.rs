use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::adapter::{AdapterConfig, AdapterError};
use crate::engine::{CapMode, CostModel, EngineError};
use crate::workloads::{SyntheticPairConfig, WorkloadError};

/// Max draft length of the entropy-stop baseline when none is given.
pub const DEFAULT_BASE_MAX_K: usize = 7;

/// Static lengths profiled by the sweep when none are given.
pub const DEFAULT_SWEEP: [usize; 5] = [2, 4, 6, 8, 10];

fn default_base_max_k() -> usize {
    DEFAULT_BASE_MAX_K
}

fn default_sweep() -> Vec<usize> {
    DEFAULT_SWEEP.to_vec()
}

/// Speculation-length policy applied to every slot of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Autoregressive,
    Static {
        k: usize,
    },
    StaticOptSweep {
        #[serde(default = "default_sweep")]
        ks: Vec<usize>,
    },
    /// Entropy-stop baseline: draft until the draft entropy exceeds the
    /// threshold or `base_max_k` tokens are drafted.
    EntropyStop {
        threshold: f64,
        #[serde(default = "default_base_max_k")]
        base_max_k: usize,
    },
    Dsde {
        #[serde(default)]
        cap: CapMode,
    },
}

impl PolicySpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        match self {
            PolicySpec::Static { k } if *k == 0 => Err(config_error("policy.k", "must be >= 1")),
            PolicySpec::StaticOptSweep { ks } if ks.is_empty() => {
                Err(config_error("policy.ks", "must not be empty"))
            }
            PolicySpec::StaticOptSweep { ks } if ks.contains(&0) => {
                Err(config_error("policy.ks", "every k must be >= 1"))
            }
            PolicySpec::EntropyStop { base_max_k, .. } if *base_max_k == 0 => {
                Err(config_error("policy.base_max_k", "must be >= 1"))
            }
            PolicySpec::EntropyStop { threshold, .. } if threshold.is_nan() => {
                Err(config_error("policy.threshold", "must be a number"))
            }
            _ => Ok(()),
        }
    }

    /// File-system friendly name.
    pub fn slug(&self) -> String {
        match self {
            PolicySpec::Autoregressive => "ar".into(),
            PolicySpec::Static { k } => format!("static_{k}"),
            PolicySpec::StaticOptSweep { .. } => "sweep".into(),
            PolicySpec::EntropyStop {
                threshold,
                base_max_k,
            } => format!("entropy_{threshold}_{base_max_k}"),
            PolicySpec::Dsde { cap: CapMode::None } => "dsde".into(),
            PolicySpec::Dsde {
                cap: CapMode::MeanMse,
            } => "dsde_cap".into(),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Autoregressive => write!(f, "autoregressive"),
            PolicySpec::Static { k } => write!(f, "static({k})"),
            PolicySpec::StaticOptSweep { ks } => {
                let list: Vec<String> = ks.iter().map(usize::to_string).collect();
                write!(f, "static_opt_sweep({})", list.join(","))
            }
            PolicySpec::EntropyStop {
                threshold,
                base_max_k,
            } => write!(f, "entropy_stop({threshold},{base_max_k})"),
            PolicySpec::Dsde { cap: CapMode::None } => write!(f, "dsde"),
            PolicySpec::Dsde {
                cap: CapMode::MeanMse,
            } => write!(f, "dsde+cap"),
        }
    }
}

/// Short forms accepted on the command line: `ar`, `static:4`,
/// `sweep` or `sweep:2,4,8`, `entropy:0.8` or `entropy:0.8:7`, `dsde`,
/// `dsde-cap`.
impl FromStr for PolicySpec {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: String| config_error("--policy", reason);
        let parse_usize = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("`{v}`: {e}")))
        };
        let mut parts = s.trim().splitn(2, ':');
        let head = parts.next().unwrap_or_default();
        let rest = parts.next();
        let spec = match (head, rest) {
            ("ar" | "autoregressive", None) => PolicySpec::Autoregressive,
            ("static", Some(k)) => PolicySpec::Static { k: parse_usize(k)? },
            ("sweep", None) => PolicySpec::StaticOptSweep { ks: default_sweep() },
            ("sweep", Some(list)) => PolicySpec::StaticOptSweep {
                ks: list.split(',').map(parse_usize).collect::<Result<_, _>>()?,
            },
            ("entropy", Some(args)) => {
                let mut fields = args.split(':');
                let threshold = fields.next().unwrap_or_default();
                let threshold = threshold
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("`{threshold}`: {e}")))?;
                let base_max_k = match fields.next() {
                    Some(v) => parse_usize(v)?,
                    None => DEFAULT_BASE_MAX_K,
                };
                if fields.next().is_some() {
                    return Err(bad(format!("`{s}`: too many fields")));
                }
                PolicySpec::EntropyStop {
                    threshold,
                    base_max_k,
                }
            }
            ("dsde", None) => PolicySpec::Dsde { cap: CapMode::None },
            ("dsde-cap", None) => PolicySpec::Dsde {
                cap: CapMode::MeanMse,
            },
            _ => return Err(bad(format!("unrecognized policy `{s}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSeeding {
    /// Each slot draws its own prompt and sampling stream.
    #[default]
    Distinct,
    /// Every slot replays slot 0.
    Identical,
}

/// What the sequences decode: generated model pairs, or a recorded trace
/// for offline analysis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Assigned to slots round-robin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<SyntheticPairConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub slot_seeding: SlotSeeding,
    /// Slot `i` gets `i * prompt_stagger` extra prompt tokens (modulo the
    /// pair's phase cycle), so slots sit in different phases at once.
    #[serde(default)]
    pub prompt_stagger: usize,
}

fn default_batch_size() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub budget_per_sequence: usize,
    /// Set from `--out`; never echoed.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub policy: PolicySpec,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub adapter: AdapterConfig,
    pub workload: WorkloadSpec,
}

pub(crate) fn config_error(field: impl Into<String>, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

pub(crate) fn adapter_error(e: AdapterError) -> ExperimentError {
    match e {
        AdapterError::InvalidConfig { field, reason } => config_error(format!("adapter.{field}"), reason),
        other => ExperimentError::Invariant(other.to_string()),
    }
}

pub(crate) fn engine_error(e: EngineError) -> ExperimentError {
    match e {
        EngineError::InvalidCost(msg) => {
            let field = msg.split_whitespace().next().unwrap_or_default();
            config_error(format!("cost.{field}"), msg)
        }
        EngineError::InvalidPolicy(msg) => config_error("policy", msg),
        EngineError::Adapter(e) => adapter_error(e),
        other => ExperimentError::Invariant(other.to_string()),
    }
}

pub(crate) fn workload_error(pair: usize, e: WorkloadError) -> ExperimentError {
    match e {
        WorkloadError::Invalid { field, reason } => {
            config_error(format!("workload.pairs[{pair}].{field}"), reason)
        }
        WorkloadError::Dist(e) => ExperimentError::Invariant(e.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_error("<toml>", e.to_string()))?;
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path == "." { "<root>".into() } else { path }, e.into_inner().message())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Canonical text form, also written as the run's config echo.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be >= 1"));
        }
        if self.budget_per_sequence == 0 {
            return Err(config_error("budget_per_sequence", "must be >= 1"));
        }
        self.policy.validate()?;
        self.cost.validate().map_err(engine_error)?;
        self.adapter.validate().map_err(adapter_error)?;
        match (self.workload.pairs.is_empty(), &self.workload.trace) {
            (true, None) => Err(config_error("workload", "needs `pairs` or `trace`")),
            (false, Some(_)) => Err(config_error("workload", "`pairs` and `trace` are exclusive")),
            _ => {
                for (i, pair) in self.workload.pairs.iter().enumerate() {
                    pair.validate().map_err(|e| workload_error(i, e))?;
                }
                Ok(())
            }
        }
    }

    /// Identifies everything that fixes the emitted-token regime; runs
    /// are comparable only when this matches.
    pub fn workload_key(&self) -> String {
        let key = serde_json::json!({
            "workload": self.workload,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "budget_per_sequence": self.budget_per_sequence,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    pub fn with_policy(&self, policy: PolicySpec) -> Self {
        Self {
            policy,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
batch_size = 2
budget_per_sequence = 16

[policy]
kind = "static"
k = 4

[[workload.pairs]]
vocab_size = 8
seed = 1
phases = [{ length_steps = 10, divergence_level = 0.1, divergence_jitter = 0.05 }]
"#;

    #[test]
    fn parses_and_echoes() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.policy, PolicySpec::Static { k: 4 });
        assert_eq!(cfg.cost, CostModel::default());
        let echo = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml_str(&echo).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str(&echo).unwrap().to_toml(), echo);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let text = MINIMAL.replace("k = 4", "k = 0");
        match ExperimentConfig::from_toml_str(&text) {
            Err(ExperimentError::Config { field, .. }) => assert_eq!(field, "policy.k"),
            other => panic!("unexpected {other:?}"),
        }
        let text = MINIMAL.replace("divergence_jitter = 0.05", "divergence_jitter = 0.5");
        match ExperimentConfig::from_toml_str(&text) {
            Err(ExperimentError::Config { field, .. }) => {
                assert_eq!(field, "workload.pairs[0].phases[0].divergence_jitter")
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = MINIMAL.replace("seed = 1", "seed = 1\nbogus = 3");
        match ExperimentConfig::from_toml_str(&text) {
            Err(ExperimentError::Config { field, .. }) => assert!(field.starts_with("workload.pairs")),
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("{MINIMAL}\n[cost]\nc_draft = -1.0\n");
        match ExperimentConfig::from_toml_str(&text) {
            Err(ExperimentError::Config { field, .. }) => assert_eq!(field, "cost.c_draft"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn policy_short_forms() {
        let cases = [
            ("ar", PolicySpec::Autoregressive),
            ("static:3", PolicySpec::Static { k: 3 }),
            ("sweep", PolicySpec::StaticOptSweep { ks: default_sweep() }),
            ("sweep:2,8", PolicySpec::StaticOptSweep { ks: vec![2, 8] }),
            (
                "entropy:0.5",
                PolicySpec::EntropyStop {
                    threshold: 0.5,
                    base_max_k: 7,
                },
            ),
            (
                "entropy:inf:4",
                PolicySpec::EntropyStop {
                    threshold: f64::INFINITY,
                    base_max_k: 4,
                },
            ),
            ("dsde", PolicySpec::Dsde { cap: CapMode::None }),
            (
                "dsde-cap",
                PolicySpec::Dsde {
                    cap: CapMode::MeanMse,
                },
            ),
        ];
        for (text, expected) in cases {
            assert_eq!(text.parse::<PolicySpec>().unwrap(), expected, "{text}");
        }
        for bad in ["static:0", "static", "sweep:", "warp", "entropy:x"] {
            assert!(bad.parse::<PolicySpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn workload_key_ignores_policy() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let other = cfg.with_policy(PolicySpec::Autoregressive);
        assert_eq!(cfg.workload_key(), other.workload_key());
        let reseeded = ExperimentConfig { seed: 8, ..cfg.clone() };
        assert_ne!(cfg.workload_key(), reseeded.workload_key());
    }
}
