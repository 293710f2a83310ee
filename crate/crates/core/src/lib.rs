//! Long-input hierarchical multi-task classification of political
//! interview answers.
//!
//! A question/answer pair is formatted, tokenized, and cut into overlapping
//! fixed-length windows. Each window is encoded independently and its
//! position-0 vector kept; the window vectors are pooled into one response
//! vector that feeds two linear heads (3-way clarity, 9-way evasion) trained
//! jointly. Fold models from stratified k-fold cross-validation are
//! ensembled by averaging class probabilities.

pub mod chunking;
pub mod dataset;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod synthetic;
pub mod tokenization;
pub mod training;

pub use error::{Error, Result};
