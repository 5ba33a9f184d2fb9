//! Temporal sentence grounding trained with shuffled "pseudo" videos.
//!
//! The target moment of every training video is cut out and reinserted at a
//! random position; the original and shuffled videos are fed as a pair to a
//! span-based grounding model with two auxiliary tasks (cross-modal relevance
//! matching and temporal order discrimination) that discourage memorizing
//! where moments usually occur.
//!
//! This crate is `no_std` (with `alloc`); file formats and the command line
//! live in the `tgshuffle` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod pseudo;
pub mod synth;
pub mod tensor;
pub mod train;

pub use data::{
    timestamp_to_frame, Dataset, DatasetSplit, FrameFeatures, GroundingSample, MomentSpan, SplitName,
    TokenSequence,
};
pub use error::{Error, Result};
pub use losses::{LossBundle, LossWeights};
pub use model::{GroundingModel, ModelConfig, ModelOutputs, Vocabulary};
pub use pseudo::{generate_pseudo_video, make_triplet, TrainingTriplet};
