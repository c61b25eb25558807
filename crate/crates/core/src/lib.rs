//! Active-learning sample selection for single-class table detection.
//!
//! Scores unlabeled pages by prediction uncertainty and prediction ambiguity,
//! turns the scores into annotation candidate lists, and runs a budgeted
//! selection loop against any [`active_loop::ModelAdapter`]. A synthetic
//! corpus generator and detector simulator make end-to-end runs possible
//! without a real detector.

pub mod active_loop;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod ids;
pub mod io;
pub mod sampler;
pub mod scoring;
pub mod seed;
pub mod simulator;

pub use error::{Error, Result};
pub use ids::ImageId;
