//! Task-driven fixation network: a dual-resolution transformer classifier
//! that learns where to look next.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod fixation;
pub mod geometry;
pub mod model;
pub mod params;
pub mod train;
pub mod transformer;
pub mod viz;

pub use error::{Error, Result};
