//! g2kit: tooling for location-free scene graphs and the evaluation stack
//! around them.
//!
//! The crate covers five areas:
//!
//! - [`sg_model`]: the scene-graph data model and the `"subject object
//!   relation; ..."` sequence text format, with left-to-right instance
//!   indexing.
//! - [`sg_matching`]: Recall@k between predicted and gold graphs, computed
//!   by searching over instance correspondences (a brute-force oracle and a
//!   beam-based heuristic tree search).
//! - [`sg_selection`]: triplet selection by cumulative confidence threshold
//!   and confidence-based token weighting.
//! - [`fusion_kernel`]: the single-head gated cross-attention fusion block
//!   with analytic gradients and finite-difference checking.
//! - [`nle_metrics`]: n-gram metrics, BERTScore with pluggable embeddings,
//!   and e-ViL score composition for answer/explanation evaluation.
//! - [`corpus_tools`]: dataset cleaning, no-relation pair augmentation,
//!   prompt construction, and corpus statistics.
//!
//! All operations are pure and deterministic given explicit seeds; corpus
//! level evaluation parallelizes per record with order-independent results.

pub mod corpus_tools;
pub mod fusion_kernel;
pub mod matrix;
pub mod nle_metrics;
pub mod sg_matching;
pub mod sg_model;
pub mod sg_selection;

pub use matrix::Matrix;
pub use sg_model::{GraphView, ObjectRef, SceneGraph, Triplet};
