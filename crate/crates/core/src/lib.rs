//! Numerical laboratory for over-smoothing in post-LayerNorm Transformers.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrices, softmax, LayerNorm and power-iteration
//!   spectral routines
//! - [`transformer`]: blocks and stacks with full per-layer traces
//! - [`graphview`]: attention as a normalized graph adjacency, ResGCN,
//!   Sinkhorn scaling and DOT / edge-list export
//! - [`diagnostics`]: cosine similarity, distance to the collapse subspace,
//!   contraction reports and density estimates
//! - [`fusion`]: concat, max and gate fusion of layer outputs
//! - [`sharing`]: cross-layer attention sharing and its FLOP count

pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod graphview;
pub mod linalg;
pub mod rng;
pub mod sharing;
pub mod transformer;
pub mod trials;

pub use diagnostics::{
    attn_layer_similarity, check_stack, contraction_report, cos_sim, distance_to_m, kde, sigma_product,
    verify_lemma1, ContractionReport, DensityEstimate, Lemma1Report, StackReport,
};
pub use error::{Error, Result};
pub use fusion::{concat_fuse, gate_fuse, gate_fuse_grad, max_fuse, ConcatParams, FusionInput, GateParams, GateWeights};
pub use graphview::{export_graph, graph_from_logits, sinkhorn, sym_normalize, AttentionGraph, GraphFormat};
pub use linalg::{lambda_max_centered, layer_norm, sigma_max, softmax_rows, LayerNormParams, Matrix};
pub use sharing::{flops_self_attention, flops_table, share_sources, FlopReport, ShareConfig};
pub use transformer::{
    attention_matrix, block_forward, random_block, stack_forward, BlockParams, BlockTrace, HeadParams, StackTrace,
};
