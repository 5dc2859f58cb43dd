#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Geometry-aware continuous prompt learning for gaze regression.

pub mod anchors;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod losses;

pub use error::{Error, Result};
