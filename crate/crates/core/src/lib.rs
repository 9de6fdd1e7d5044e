// Validation uses negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod par;
pub mod sample;
pub mod synth;
pub mod train;

pub use error::{DloError, Result};
pub use geometry::{NodeSequence, PointCloud, Vec3};
