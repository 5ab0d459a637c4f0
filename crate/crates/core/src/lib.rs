//! Balanced hyperbolic embeddings for hierarchy-aware classification and
//! out-of-distribution detection.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`geometry`] — Poincare-ball primitives and Riemannian SGD plumbing.
//! 2. [`hierarchy`] — class-hierarchy parsing, graph distances, LCA queries.
//! 3. [`embedder`] — distortion-plus-norm-balancing embedding training.
//! 4. [`protohead`] — hyperbolic prototype classifier and a matched
//!    Euclidean softmax baseline over a small feedforward backbone.
//! 5. [`scoring`] — OOD scoring functions (MSP, temperature scaling,
//!    energy, generalized entropy, KNN) over either head.
//! 6. [`metrics`] — embedding quality, detection metrics (AUROC, AUPR,
//!    FPR@95) and hierarchical generalization metrics (H-Dist, HSI).
//! 7. [`synthdata`] — deterministic hierarchy-aligned synthetic datasets.
//!
//! The `hyperbal` binary wires these together behind a CLI with stable
//! file formats.

pub mod embedder;
pub mod error;
pub mod geometry;
pub mod hierarchy;
pub mod metrics;
pub mod protohead;
pub mod scoring;
pub mod synthdata;

pub use error::{Error, Result};
