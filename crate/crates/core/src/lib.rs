//! Variational imitation-learning planner for robotic calligraphy.
//!
//! The crate bundles a synthetic expert (stroke templates rendered onto a
//! simulated canvas), an encoder / Bi-LSTM latent predictor / decoder policy
//! trained by behavior cloning, and a closed-loop rollout harness that feeds
//! the policy its own predictions.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod geometry;
pub mod imageio;
pub mod model;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
