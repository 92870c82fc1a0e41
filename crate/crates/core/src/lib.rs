//! Read-and-select candidate ranking for zero-shot entity linking.
//!
//! Pipeline: [`corpus`] records are indexed and queried by [`retrieval`]
//! (BM25), candidates are read against the mention by [`reading`] into
//! compact prefix representations, and [`selecting`] fuses all of them into
//! one encoder pass that labels the gold candidate's tokens. [`training`]
//! optimizes the shared encoder end to end, [`baselines`] holds the
//! cross-encoder and reading-only comparisons, and [`evaluation`] computes
//! normalized accuracy and its breakdowns.

pub mod baselines;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod predict;
pub mod reading;
pub mod retrieval;
pub mod selecting;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
