//! Treat LoRA adapters as algebraic building blocks.
//!
//! Reconstruct per-layer deltas from adapter factors, compose them by signed
//! addition, measure layer-wise interference between adapters, check rank
//! bounds, and evaluate perplexity of a base model with composed deltas
//! applied.

pub mod adapter;
pub mod checkpoint;
pub mod container;
pub mod delta;
pub mod error;
pub mod eval;
pub mod rank;
pub mod rng;
pub mod similarity;
pub mod superposition;
pub mod tensor;

pub use adapter::{
    load_adapter, load_adapter_with, parse_layer_name, save_adapter, AdapterBundle, ConfigOverrides, Factor,
    LayerKey, LoraConfig, LoraLayerPair, ModuleKind,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, ModelDims, ModelWeights};
pub use delta::{
    apply_to_base, build_delta_set, compose, compose_with, rank_certificate, reconstruct_delta,
    reconstruct_delta_outer, ComposeOptions, DeltaSet, RankCertificate,
};
pub use error::{Error, ErrorClass, Result};
pub use eval::{eval_composed, forward, load_dataset, mean_nll, mean_nll_weighted, PerplexityResult, TokenDataset, Weighting};
pub use rank::{numerical_rank, singular_values, DEFAULT_RANK_TOL};
pub use similarity::{cosine_layer, cosine_report, linear_fit, percent_change, rms_score, FitResult, SimilarityReport};
pub use superposition::{gen_random_delta, orthogonality_stats, rank_saturation_sweep, simulate, SimResult, SimSpec};
pub use tensor::{add_scaled, frobenius_inner, frobenius_norm, matmul, transpose, Matrix};
