//! Radar-camera bird's-eye-view fusion detector.

pub mod error;
pub mod eval;
pub mod detection;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod radar;
pub mod rdl;
pub mod seed;
pub mod synth;
pub mod train;
pub mod uff;

pub use error::{Error, Result};
