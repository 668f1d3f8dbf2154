//! Multi-sound-source localization on post-encoder feature grids.
//!
//! The pipeline takes a visual feature grid and a pooled audio embedding per
//! clip and produces one binary localization map per sounding object,
//! without being told how many objects there are:
//!
//! 1. [`sarl`] normalizes audio-visual cosine maps, derives soft masks, the
//!    sound-weighted features and a background probe;
//! 2. [`ioi`] repeatedly seeds on the strongest remaining cell, carves out
//!    its region against the background probe and suppresses it;
//! 3. [`grouping`] drops background-like seeds and merges the rest into
//!    objects with union-find.
//!
//! [`objectives`] holds the two training losses and their gradients,
//! [`metrics`] the evaluation suite, [`synth`] a planted-truth scene
//! generator and [`trainer`] a small projection-learning loop.

pub mod assignment;
pub mod checks;
pub mod config;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod grid;
pub mod grouping;
pub mod ioi;
pub mod metrics;
pub mod objectives;
pub mod oracle;
pub mod pipeline;
pub mod sarl;
pub mod synth;
pub mod trainer;
pub mod union_find;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use grid::{AudioEmbedding, BinaryMap, CellIndex, FeatureGrid, SimilarityMap, VectorBatch};
pub use pipeline::{localize, Localization, LocalizerConfig};
