//! Hierarchical attention over dependency-tree sentence encodings for
//! multiple-choice machine comprehension.
//!
//! The pipeline: sentences arrive as pre-parsed dependency trees
//! ([`treebank`]), a Child-Sum Tree-LSTM encodes them ([`encoder`]), a
//! multi-hop cosine-softmax attention module extracts question-relevant
//! story evidence ([`memory`]), and an answer head scores the choices
//! and trains against a KL objective ([`answer`], [`training`]). All
//! gradients come from the reverse-mode tape in [`numeric`]. Synthetic
//! tasks with known ground truth live in [`datagen`]; trivial
//! comparison baselines in [`baselines`].

pub mod answer;
pub mod baselines;
pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod model;
pub mod numeric;
pub mod training;
pub mod treebank;

pub use cli::cli_main;
pub use error::{Error, Result};
