//! Synthetic model pairs and recorded signal traces.

mod synthetic;
mod trace;

pub use synthetic::{
    gen_pair, RegimePhase, SyntheticModel, SyntheticPair, SyntheticPairConfig, WorkloadError,
    POSITION_PERIOD,
};
pub use trace::{
    format_trace, load_trace, parse_trace, replay_adapter, save_trace, SignalTrace, TraceError,
    TraceRecord, TRACE_HEADER,
};
