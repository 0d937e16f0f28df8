//! Linear number subspaces in a masked language model.
//!
//! The crate trains linear probes for grammatical number on hidden states,
//! builds a low-dimensional number subspace by iterative nullspace
//! projection, and rewrites hidden states along that subspace in the middle
//! of a forward pass to measure the causal effect on verb agreement.
//!
//! * [`subspace`]: projections and the reflection/ablation rewrite.
//! * [`probe`], [`inlp`]: logistic probes and iterative nullspace projection.
//! * [`corpus`]: templated agreement sentences and the toy vocabulary.
//! * [`mlm`]: a small transformer encoder with intervention hooks.
//! * [`harness`]: conjugation accuracy, experiments, statistics and reports.
//! * [`exchange`]: file formats shared with external encoders.

pub mod corpus;
pub mod error;
pub mod exchange;
pub mod harness;
pub mod inlp;
pub mod mlm;
pub mod probe;
pub mod subspace;
pub mod types;

pub use error::{Error, Result};
pub use types::{Number, PositionRole};
