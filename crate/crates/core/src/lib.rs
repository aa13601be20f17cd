//! Variational time-series feature extraction on motion data.
//!
//! Chained VAEs, VAE-DMP and VTSFE (light and full schemes) built on a
//! small reverse-mode differentiation core.

pub mod bounds;
pub mod check;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod model;
pub mod nets;
pub mod training;

pub use error::{Error, Result};
