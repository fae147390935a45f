//! Sparse-anchor lane detection.
//!
//! A small set of learned lane/angle query pairs is decoded into rotated
//! line anchors plus per-row offsets by a two-stage transformer decoder.
//! Training uses Hungarian set assignment with focal, L1 and line-IoU
//! losses. The crate also ships synthetic road scenes, TuSimple-style label
//! I/O, detection metrics and an analytic multiply-accumulate counter.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod model;
pub mod train;

pub use error::{Error, Result};
