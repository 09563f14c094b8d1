//! Position-aware graph transformer for top-K recommendation on implicit
//! user-item feedback.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod encoding;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
