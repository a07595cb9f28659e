//! Whole-slide colorectal grading by mixed-supervision multiple-instance
//! learning: tissue segmentation, grid tiling, a tile classifier, severity
//! ranking with Top-k sampling, and evaluation statistics.

pub mod eval;
pub mod label;
pub mod mil;
pub mod rng;
pub mod scorer;
pub mod slide;
pub mod synth;
pub mod tiler;
pub mod tissue;

pub use label::{ClassLabel, ClassProbs, InvalidSimplex, NUM_CLASSES};
