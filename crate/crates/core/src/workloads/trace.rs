//! Recorded per-step signal traces and offline adapter replay.
//!
//! File format, one verification step per line after a mandatory header:
//!
//! ```text
//! step,kld,entropy,accepted
//! 0,0.12;0.4;1.3,0.9;1.1;1.6,1;1;0
//! ```
//!
//! Vectors are `;`-separated, `accepted` entries are `0` or `1`, and all three
//! vectors of a row must have the same length. A completely empty file is an
//! empty trace.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterError, SlAdapter, SlDecision};

pub const TRACE_HEADER: &str = "step,kld,entropy,accepted";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// One verification step's signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub kld: Vec<f64>,
    /// Draft entropy per drafted position.
    pub entropy: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl TraceRecord {
    /// Length of the accepted prefix.
    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().take_while(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignalTrace {
    pub records: Vec<TraceRecord>,
}

impl SignalTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.records.iter().map(|r| r.kld.len()).sum()
    }
}

fn join<T>(values: &[T], fmt: impl Fn(&T) -> String) -> String {
    values.iter().map(fmt).collect::<Vec<_>>().join(";")
}

/// Renders a trace in the file format. Floats use the shortest
/// representation that parses back to the same value.
pub fn format_trace(trace: &SignalTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            join(&r.kld, |v| v.to_string()),
            join(&r.entropy, |v| v.to_string()),
            join(&r.accepted, |&a| if a { "1".into() } else { "0".into() }),
        );
    }
    out
}

pub fn save_trace(trace: &SignalTrace, path: &Path) -> Result<(), TraceError> {
    fs::write(path, format_trace(trace)).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_trace(path: &Path) -> Result<SignalTrace, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace(&text)
}

pub fn parse_trace(text: &str) -> Result<SignalTrace, TraceError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(SignalTrace::default()),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i + 1, l.trim()),
        }
    };
    if header.1 != TRACE_HEADER {
        return Err(TraceError::Malformed {
            line: header.0,
            reason: format!("expected header `{TRACE_HEADER}`"),
        });
    }

    let mut records = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let malformed = |reason: String| TraceError::Malformed { line, reason };
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(malformed(format!("expected 4 columns, found {}", fields.len())));
        }
        let step = fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| malformed(format!("step: {e}")))?;
        let kld = parse_floats(fields[1]).map_err(|e| malformed(format!("kld: {e}")))?;
        let entropy = parse_floats(fields[2]).map_err(|e| malformed(format!("entropy: {e}")))?;
        let accepted = parse_flags(fields[3]).map_err(|e| malformed(format!("accepted: {e}")))?;
        if kld.len() != entropy.len() || kld.len() != accepted.len() {
            return Err(malformed(format!(
                "vector lengths differ (kld {}, entropy {}, accepted {})",
                kld.len(),
                entropy.len(),
                accepted.len()
            )));
        }
        if let Some(v) = kld.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(malformed(format!("kld: invalid divergence {v}")));
        }
        records.push(TraceRecord {
            step,
            kld,
            entropy,
            accepted,
        });
    }
    Ok(SignalTrace { records })
}

fn parse_floats(field: &str) -> Result<Vec<f64>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

fn parse_flags(field: &str) -> Result<Vec<bool>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|s| match s.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(format!("`{other}` is not 0 or 1")),
        })
        .collect()
}

/// Drives a fresh adapter through the trace exactly as live decoding would,
/// returning the decision issued after each record.
pub fn replay_adapter(
    trace: &SignalTrace,
    config: &AdapterConfig,
) -> Result<Vec<SlDecision>, TraceError> {
    let mut adapter = SlAdapter::new(*config)?;
    let mut decisions = Vec::with_capacity(trace.len());
    for record in &trace.records {
        adapter.observe(&record.kld, record.accepted_count());
        if adapter.awaiting_calibration() {
            // A lone sequence is its own pool under global scope.
            let stats = adapter.pending_calibration().map(|a| a.stats()).unwrap_or_default();
            adapter.finish_calibration(stats);
        }
        decisions.push(*adapter.decision());
    }
    Ok(decisions)
}
