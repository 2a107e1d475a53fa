//! Speculative decoding with divergence-driven, per-sequence draft lengths.
//!
//! The crate simulates a batched serving loop over toy token models. A draft
//! model proposes tokens, a target model verifies them with rejection
//! sampling, and each sequence's next draft length is predicted from the
//! recent history of per-token KL divergence between the two models.

pub mod adapter;
pub mod dist;
pub mod engine;
pub mod experiments;
pub mod metrics;
pub mod protocol;
pub mod workloads;

pub use adapter::{AdapterConfig, SlAdapter, SlDecision};
pub use dist::{ProbDist, RandomSource, TokenId, Vocabulary};
pub use engine::{
    run_until_done, step_batch, CapMode, CostModel, ModelPair, SequenceState, SlCapPolicy,
    SlController, StepReport,
};
pub use metrics::{correlation_analysis, pearson, speedup, CorrelationReport, RunMetrics};
pub use protocol::{propose, verify, DraftProposal, SamplingMode, TokenModel, VerificationResult};
