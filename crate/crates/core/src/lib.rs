//! Interpolation between two real images with a pretrained latent diffusion
//! model.
//!
//! Frames are generated along a branching tree: the two inputs are noised
//! with shared noise, interpolated, and denoised to produce the midpoint
//! frame; each deeper level repeats this between neighbouring frames at a
//! lower noise level. Denoising is conditioned on per-image text embeddings
//! refined by textual inversion and, when available, on interpolated poses.
//! Several candidates per frame can be ranked by image-text similarity or
//! picked by a user through the HTTP service.

pub mod backend;
pub mod diffusion;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod pose;
pub mod project;
pub mod ranking;
pub mod service;
pub mod tree;

pub use error::{Error, Result};
