//! Diffusion mathematics: schedules, forward noising, DDIM sampling,
//! interpolation primitives and latent warping. Everything here is a pure
//! function of its inputs.

pub mod ddim;
pub mod interp;
pub(crate) mod latent;
pub mod schedule;
pub mod warp;

pub use ddim::{ddim_denoise, ddim_step};
pub use interp::{lerp, slerp};
pub use latent::{Latent, Noise};
pub use schedule::{NoiseSchedule, ScheduleProfile, MIN_GENERATION_STEPS};
pub use warp::{warp_latent, AffineTransform, Motion};
