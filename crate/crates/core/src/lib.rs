//! Distillation of compressed-vision multimodal decoders by matching
//! unbalanced vision tokens.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: `f64` tensors and a reverse-mode tape.
//! * [`assignment`]: Manhattan cost matrices and a rectangular assignment
//!   solver, plus an exhaustive oracle and a pooling alternative.
//! * [`losses`]: reverse KL, vision semantic and vision-language affinity
//!   losses, cross-entropy and their weighted combination.
//! * [`model`]: a toy multimodal decoder with teacher and compressed student
//!   projectors.
//! * [`data`]: a seeded synthetic "read the symbols in the image" task.
//! * [`pipeline`]: teacher training, the distillation step, Adam, evaluation.
//! * [`checkpoint`], [`config`], [`cli`]: persistence and the command line.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod assignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod losses;
pub mod model;
pub mod pipeline;
