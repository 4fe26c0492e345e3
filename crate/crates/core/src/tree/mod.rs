//! The branching interpolation scheme and its baselines.

mod baselines;
mod build;
mod config;
mod generate;
pub mod noise;

pub use baselines::{did, interpolate_denoise, interpolate_denoise_with, interpolate_only, run_baseline};
pub use build::{build_tree, FrameNode, InterpolationTree};
pub use config::{frame_schedule, place_timesteps, GenerationConfig, Scheme};
pub use generate::{
    apply_motion, generate_frame, run_interpolation, run_tree, ConditioningProvider, Diagnostics, Frame,
    FrameSequence, FrameStore, NodeOutput, PairConditioning,
};
pub use noise::{keyed_noise, node_noise};

use crate::backend::{Backend, Image};
use crate::error::Result;

/// Runs `config.scheme` on a pair of images.
pub fn run_scheme(
    image_a: &Image,
    image_b: &Image,
    config: &GenerationConfig,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
) -> Result<FrameSequence> {
    match config.scheme {
        Scheme::Ours => run_interpolation(image_a, image_b, config, backend, cond),
        s => run_baseline(s, image_a, image_b, config, backend, cond),
    }
}

pub(crate) use baselines::run_baseline_latents;
