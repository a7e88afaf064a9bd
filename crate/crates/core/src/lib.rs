//! Two-stream face/context emotion recognition with attention-guided
//! context debiasing, built on a small reverse-mode autodiff engine.

pub mod agcim;
pub mod attention;
pub mod checks;
pub mod classifier;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
