//! Cost model, throughput measurement and representation diagnostics.

pub mod bench;
pub mod diagnostics;
pub mod flops;

pub use bench::{bench, BenchReport};
pub use diagnostics::{
    attention_focus, cka, cka_matrix, score_map, token_similarity_stats, ScoreMap,
    SimilarityMeasure,
};
pub use flops::{flops, param_count, CostReport, FlopConvention};
