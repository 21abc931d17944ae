//! Splitting source code identifiers into subtokens.
//!
//! Ground truth comes from naming conventions ([`corpus::heuristic_split`]);
//! three splitter families then recover boundaries from the merged lowercase
//! string: a greedy character language model ([`lm`]), a dynamic-programming
//! word segmenter ([`dp`]) and a bidirectional LSTM/GRU labeler ([`rnn`]).
//! [`eval`] scores them with micro-averaged precision, recall and F1.

pub mod cli;
pub mod corpus;
pub mod dp;
pub mod error;
pub mod eval;
pub mod io;
pub mod lm;
pub mod nn;
pub mod rnn;
pub mod splitter;

pub use corpus::{Boundaries, Dataset, SubtokenRecord};
pub use error::{Error, Result};
pub use splitter::Splitter;
