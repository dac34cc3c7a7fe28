//! Knowledge-grounded dialogue generation at desk scale: a small
//! knowledge-aware transformer, BM25 distant supervision for pseudo-labeled
//! training data, a three-stage training pipeline, and the usual generation
//! metrics. Everything runs on CPU in f64 with seeded determinism.

pub mod bm25;
pub mod data;
pub mod distant;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
