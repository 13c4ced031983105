//! Composable mask-gated GAN modules for multi-domain image generation and
//! translation, with a synthetic colored-digit dataset, a WGAN-GP training
//! engine, test-time module composition and a classifier-based evaluation
//! harness.

pub mod composer;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod nets;
pub mod objectives;
pub mod schema_data;
pub mod trainer;

pub use error::{ModGanError, Result};
