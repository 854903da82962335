//! Set-to-sequence permutation learning.
//!
//! The model encodes an unordered set with multi-head attention and attention
//! pooling, refines element and set representations jointly with set
//! interdependence attention layers, and orders the elements with an LSTM
//! pointer decoder enriched by pairwise history/future context.
//!
//! Alongside the model the crate ships the benchmark generators (planar TSP
//! with an exact Held–Karp oracle, formal grammars, n-th order rulesets),
//! evaluation metrics and a small training harness.

pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod permutation;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};
pub use permutation::Permutation;
