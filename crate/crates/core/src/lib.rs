//! Text-to-image flow matching carried out directly in a frozen visual
//! feature space, at a scale that trains on a laptop CPU.
//!
//! Pixels are mapped to a `(H/16) x (W/16) x d` token grid by a frozen patch
//! featurizer, a small single-stream diffusion transformer learns the flow
//! velocity over text and image tokens jointly, and a convolutional decoder
//! maps sampled feature grids back to pixels.

pub mod analysis;
pub mod autoencoder;
pub mod dit;
pub mod error;
pub mod featurizer;
pub mod flow;
pub mod image;
pub mod nn;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod rope;
pub mod textcond;

pub use error::{Error, Result};
