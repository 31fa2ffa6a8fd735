//! Perception-token toolkit.
//!
//! Depth maps and bounding boxes become short runs of auxiliary vocabulary
//! tokens that a language model can emit as intermediate reasoning steps.
//! This crate holds the tokenizers for both representations, the decoding
//! grammar that keeps generated spans well formed, curriculum samplers,
//! training-data and benchmark synthesis, the distillation and reconstruction
//! losses, and the programmatic evaluators.

pub mod error;
pub mod vocab;
pub mod depth_map;
pub mod depth_codec;
pub mod bbox_codec;
pub mod seeding;
pub mod jsonl;
pub mod curriculum;
pub mod datagen;
pub mod bench;
pub mod grammar;
pub mod losses;
pub mod eval;

pub use error::{Error, Result};
