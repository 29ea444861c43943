//! Judges, clip metrics, attention analysis, the mode benchmark and the
//! tier ablation harness.

pub mod attention;
pub mod benchmark;
pub mod judge;
pub mod metrics;

pub use attention::{attention_alignment, concentration, observation_step, AlignmentSummary};
pub use benchmark::{
    cumulative_masks, generate_framewise_set, generate_set, probe_attention, run_benchmark, run_tier_ablation, AttentionProbe, BackgroundCheck,
    BenchmarkReport, Comparison, EvalSettings, TierAblation,
};
pub use judge::{motion_features, JudgeAccuracy, JudgeConfig, Judges, GATE_ACCURACY};
pub use metrics::{
    background_complexity, background_mask, consistency_score, editability_score, evaluate_clips, fidelity_score,
    frechet_distance, frechet_feature_distance, Ffd, MetricsReport,
};
