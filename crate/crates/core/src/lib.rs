//! Distortion-disentangled positive-only contrastive learning.

pub mod augmentation;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod representation;
pub mod training;

pub use error::{Error, Result};
