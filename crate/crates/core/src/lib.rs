//! Desk-scale laboratory for cross-lingual transfer of monolingual transformer
//! encoders.
//!
//! The library implements the full experimental stack needed to study
//! lexical-level transfer of a masked-language-model encoder between
//! languages: a tape-based autodiff engine (`numerics`), subword vocabulary
//! learning (`tokenize`), corpus handling and synthetic-language generation
//! (`data`), the encoder with swappable per-language embedding sets, freeze
//! masks and adapters (`model`), the training pipelines (`pipelines`), a
//! cross-lingual word-embedding baseline (`clwe`), evaluation metrics and
//! probing protocols (`evalprobe`), and bit-exact checkpointing (`persist`).

pub mod clwe;
pub mod data;
pub mod error;
pub mod evalprobe;
pub mod model;
pub mod numerics;
pub mod persist;
pub mod pipelines;
pub mod tokenize;

pub use error::{Error, Result};
