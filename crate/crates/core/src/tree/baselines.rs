//! Comparison schemes: plain latent interpolation, interpolate-then-denoise
//! with a per-frame noise level, and the branching denoise-interpolate-
//! denoise scheme with and without shared input noise.

use std::collections::BTreeMap;

use super::build::InterpolationTree;
use super::config::{frame_schedule, GenerationConfig, Scheme};
use super::generate::{
    encode_inputs, endpoint_frames, ConditioningProvider, Diagnostics, Frame, FrameSequence,
};
use super::noise::{keyed_noise, BASELINE_NAMESPACE};
use crate::backend::{Backend, Image};
use crate::diffusion::latent::from_flat;
use crate::diffusion::{ddim_denoise, slerp, Latent, NoiseSchedule};
use crate::error::{Error, Result};

/// Stream of the per-step noise `eps_t` shared by both input trajectories.
fn trajectory_stream(t: u32) -> u64 {
    BASELINE_NAMESPACE | t as u64
}

const DID_STREAM_A: u64 = BASELINE_NAMESPACE | (1 << 40);
const DID_STREAM_B: u64 = BASELINE_NAMESPACE | (2 << 40);

fn slerp_latents(a: &Latent, b: &Latent, u: f64) -> Result<Latent> {
    let data = from_flat(a.shape(), slerp(a.as_slice(), b.as_slice(), u)?)?;
    Latent::new(data, a.timestep)
}

fn assemble(scheme: Scheme, za: &Latent, zb: &Latent, interior: Vec<Latent>, backend: &dyn Backend, diagnostics: Diagnostics) -> Result<FrameSequence> {
    let n = interior.len() + 1;
    let (first, last) = endpoint_frames(za, zb, n, backend)?;
    let mut frames = vec![first];
    for (k, latent) in interior.into_iter().enumerate() {
        frames.push(Frame {
            index: k + 1,
            image: backend.decode_latent(&latent)?,
            latent,
        });
    }
    frames.push(last);
    Ok(FrameSequence {
        scheme,
        frames,
        nodes: BTreeMap::new(),
        diagnostics,
    })
}

/// Frames are decoded slerps of the clean input latents; no diffusion.
pub fn interpolate_only(za: &Latent, zb: &Latent, config: &GenerationConfig, backend: &dyn Backend) -> Result<FrameSequence> {
    let positions = config.positions();
    let interior = (1..config.num_frames)
        .map(|i| slerp_latents(za, zb, positions[i]))
        .collect::<Result<Vec<_>>>()?;
    assemble(Scheme::InterpolateOnly, za, zb, interior, backend, Diagnostics::default())
}

/// Interpolate-denoise with the default triangular per-frame noise levels.
pub fn interpolate_denoise(
    za: &Latent,
    zb: &Latent,
    config: &GenerationConfig,
    schedule: &NoiseSchedule,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
) -> Result<FrameSequence> {
    let (t_min, t_max) = config.t_window();
    let n = config.num_frames;
    let ts = (1..n)
        .map(|i| frame_schedule(i, n, t_min, t_max))
        .collect::<Result<Vec<_>>>()?;
    interpolate_denoise_with(za, zb, &ts, config, schedule, backend, cond)
}

/// Interpolate-denoise with explicit noise levels `ts[i - 1]` for frames
/// `1..N`. Both inputs are diffused step by step with the same noise at
/// every step; frame `i` slerps the two trajectories at its level and is
/// denoised from there. A level of 0 leaves the frame as a clean slerp.
pub fn interpolate_denoise_with(
    za: &Latent,
    zb: &Latent,
    ts: &[u32],
    config: &GenerationConfig,
    schedule: &NoiseSchedule,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
) -> Result<FrameSequence> {
    let n = config.num_frames;
    if ts.len() + 1 != n {
        return Err(Error::InvalidArgument(format!("{} frame levels for {} interior frames", ts.len(), n - 1)));
    }
    let positions = config.positions();
    let t_top = ts.iter().copied().max().unwrap_or(0);
    schedule.check_timestep(t_top)?;
    let mut traj: BTreeMap<u32, (Latent, Latent)> = BTreeMap::new();
    traj.insert(0, (za.clone(), zb.clone()));
    let (mut a, mut b) = (za.clone(), zb.clone());
    for t in 1..=t_top {
        let eps = keyed_noise(config.global_seed, trajectory_stream(t), za.shape());
        a = schedule.forward_diffuse_step(&a, &eps)?;
        b = schedule.forward_diffuse_step(&b, &eps)?;
        if ts.contains(&t) {
            traj.insert(t, (a.clone(), b.clone()));
        }
    }
    let mut interior = Vec::with_capacity(n - 1);
    for i in 1..n {
        let t = ts[i - 1];
        let (ta, tb) = &traj[&t];
        let mixed = slerp_latents(ta, tb, positions[i])?;
        let latent = if t == 0 {
            mixed
        } else {
            let bundle = cond.conditioning(i, positions[i])?;
            ddim_denoise(&mixed, 0, &bundle, backend, schedule, config.substeps_from(t))?
        };
        interior.push(latent);
    }
    assemble(Scheme::InterpolateDenoise, za, zb, interior, backend, Diagnostics::default())
}

/// Denoise-interpolate-denoise. Both inputs are noised once to the tree's
/// largest timestep (with one shared noise draw when `shared`, independent
/// draws otherwise). Each level interpolates new latents from the current
/// noisy neighbours; then every latent present is denoised to the next
/// level's timestep, and finally to 0. Endpoints are output unchanged.
#[allow(clippy::too_many_arguments)]
pub fn did(
    za: &Latent,
    zb: &Latent,
    tree: &InterpolationTree,
    shared: bool,
    config: &GenerationConfig,
    schedule: &NoiseSchedule,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
) -> Result<FrameSequence> {
    let n = tree.num_frames;
    let positions = config.positions();
    let t_root = *tree.timesteps.last().ok_or_else(|| Error::InsufficientLevels("empty tree".into()))?;
    let eps_a = keyed_noise(config.global_seed, DID_STREAM_A, za.shape());
    let eps_b = if shared {
        eps_a.clone()
    } else {
        keyed_noise(config.global_seed, DID_STREAM_B, zb.shape())
    };
    let na = schedule.forward_diffuse(za, t_root, &eps_a)?;
    let nb = schedule.forward_diffuse(zb, t_root, &eps_b)?;
    let mut current: BTreeMap<usize, Latent> = BTreeMap::from([(0, na.clone()), (n, nb.clone())]);
    let bundles = (0..=n)
        .map(|i| cond.conditioning(i, positions[i]))
        .collect::<Result<Vec<_>>>()?;
    let depth = tree.depth();
    for level in 0..depth {
        let mut added = Vec::new();
        for node in tree.level(level) {
            let (lo, hi) = (&current[&node.parent_lo], &current[&node.parent_hi]);
            added.push((node.index, slerp_latents(lo, hi, node.weight)?));
        }
        current.extend(added);
        let t_next = if level + 1 < depth {
            tree.level(level + 1).next().map(|nd| nd.timestep).unwrap_or(0)
        } else {
            0
        };
        let t_cur = current[&0].timestep;
        let substeps = config.substeps_from(t_cur - t_next);
        for (&i, z) in current.iter_mut() {
            *z = ddim_denoise(z, t_next, &bundles[i], backend, schedule, substeps)?;
        }
    }
    let interior = (1..n).map(|i| current[&i].clone()).collect();
    let scheme = if shared { Scheme::Did } else { Scheme::DidUnshared };
    assemble(scheme, za, zb, interior, backend, Diagnostics { noised_inputs: Some((na, nb)) })
}

/// Runs one of the four comparison schemes on a pair of images.
pub fn run_baseline(
    scheme: Scheme,
    image_a: &Image,
    image_b: &Image,
    config: &GenerationConfig,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
) -> Result<FrameSequence> {
    config.validate()?;
    let schedule = config.schedule()?;
    let (za, zb) = encode_inputs(image_a, image_b, backend)?;
    run_baseline_latents(scheme, &za, &zb, config, &schedule, backend, cond)
}

pub(crate) fn run_baseline_latents(
    scheme: Scheme,
    za: &Latent,
    zb: &Latent,
    config: &GenerationConfig,
    schedule: &NoiseSchedule,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
) -> Result<FrameSequence> {
    match scheme {
        Scheme::InterpolateOnly => interpolate_only(za, zb, config, backend),
        Scheme::InterpolateDenoise => interpolate_denoise(za, zb, config, schedule, backend, cond),
        Scheme::Did | Scheme::DidUnshared => {
            let tree = config.tree()?;
            did(za, zb, &tree, scheme == Scheme::Did, config, schedule, backend, cond)
        }
        Scheme::Ours => Err(Error::InvalidConfig("ours is not a baseline scheme".into())),
    }
}
