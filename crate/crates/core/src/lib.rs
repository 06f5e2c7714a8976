//! Similarity embeddings learned from crowd answers to "which of B or C is
//! more like A?" questions, with an optional NEITHER answer and per-user
//! rescalings of the shared space.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod likelihood;
pub mod model;
pub mod optimizer;
pub mod selection;
pub mod simulator;
pub mod store;

pub use domain::{
    Answer, BatchQuestion, Dataset, Embedding, GlobalParams, HitBatch, ModelKind, ObjectRecord, Observation,
    PriorConfig, Role, Triple, UserProfile, Verdict, HIT_SIZE,
};
pub use error::{Error, Result};
pub use model::Model;
