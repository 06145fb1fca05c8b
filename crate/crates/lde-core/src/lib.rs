//! Latent Domain Expansion: domain-generalizable person re-identification at
//! desk scale.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`rng`], [`linalg`], [`graph`], [`gradcheck`]: the numeric
//!   substrate — dense f64 tensors, seeded randomness, matrix kernels, a
//!   define-by-run autodiff graph, and finite-difference verification.
//! - [`decouple`]: the Domain Decoupling Module and multi-scale latent-space
//!   separation that split features into identity and domain streams.
//! - [`expansion`]: per-domain feature statistics and the implicit-expansion
//!   cross-entropy loss, with its Monte-Carlo oracle, plus triplet and total
//!   objectives.
//! - [`model`]: the dual-stream toy CNN tying the pieces together.
//! - [`data`], [`eval`]: manifests, split protocols, the synthetic corpus
//!   generator, and mAP/CMC ranking.
//! - [`train`]: the optimization loop with checkpoint/resume.
//! - [`verify`]: the self-check suite backing `lde verify`.

pub mod data;
pub mod decouple;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{LdeError, Result};
pub use tensor::Tensor;
