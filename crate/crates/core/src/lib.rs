// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod laser;
pub mod optics;
pub mod scene;
pub mod tracking;
pub mod vision;

pub use error::{Error, Result};
pub use geometry::Vec3;
