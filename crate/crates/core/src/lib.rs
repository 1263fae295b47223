//! Latency-adjustable transformer inference.
//!
//! Each attention layer scores its input word-vectors by how much attention
//! they receive, keeps the highest-scoring fraction and drops the rest, so
//! later layers run on shorter sequences. The crate provides the inference
//! engine, the ACC profiling pipeline that derives per-layer elimination
//! rates, and analytic and instrumented cost models for the resulting
//! speedup.

pub mod acc;
pub mod attention;
#[cfg(feature = "cli")]
pub mod cli;
pub mod cost_model;
pub mod error;
pub mod inputs;
pub mod model;
pub mod model_io;
pub mod runner;
pub mod schedule;
pub mod tensor;

pub use acc::{acc_of_layer, fit_quadratic, profile_model, score_vector, AccProfile, QuadraticFit, ScoreVector};
pub use attention::{
    attention_context, attention_probs, proposed_attention_forward, select_positions, sort_eliminate,
    AttentionProbs, EliminationOutcome, EliminationRequest, Placement, Policy,
};
pub use cost_model::{
    analytic_flops, closed_form_pw, compare_speedup, estimate_speedup, instrumented_count, processed_words,
    CostReport, FlopCounter, FlopCounts, FlopTable, FlopVariant, SpeedupComparison,
};
pub use error::{Error, Result};
pub use model::Model;
pub use model_io::{generate_random_model, load_model, save_model, Mode, ModelConfig, WeightStore};
pub use runner::{
    compare_latency, forward_baseline, forward_detailed, forward_pruned, measure_interleaved, measure_latency, ForwardOptions,
    LatencyStats, RunReport,
};
pub use schedule::{
    elimination_profile, make_schedule, retention_plan, EliminationProfile, PinnedPolicy, PruneSchedule,
    RetentionPlan,
};
pub use tensor::Matrix;
