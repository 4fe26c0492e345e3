use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::build::{FrameNode, InterpolationTree};
use super::config::{GenerationConfig, Scheme};
use super::noise::node_noise;
use crate::backend::{Backend, ConditioningBundle, Embedding, Image};
use crate::diffusion::{ddim_denoise, lerp, slerp, warp_latent, AffineTransform, Latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pose::{interpolate_pose, render_pose, PoseSkeleton};
use crate::ranking::{select_best, CandidateSet};

/// Clean latents of finalized frames, by frame index.
pub type FrameStore = BTreeMap<usize, Latent>;

/// Supplies the denoising conditioning of frame `index`, which sits at
/// position `position` in `[0, 1]` between the two inputs.
pub trait ConditioningProvider: Sync {
    fn conditioning(&self, index: usize, position: f64) -> Result<ConditioningBundle>;
}

/// Conditioning interpolated between the two inputs: positive embeddings
/// slerped, a single shared negative, and poses lerped over their shared
/// joints then rendered. Per-frame overrides replace the interpolated
/// prompt or pose for that frame only.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConditioning {
    pub positive_a: Embedding,
    pub positive_b: Embedding,
    pub negative: Embedding,
    pub guidance_scale: f64,
    pub pose_a: Option<PoseSkeleton>,
    pub pose_b: Option<PoseSkeleton>,
    pub pose_conf_floor: f64,
    /// Size pose images are rendered at; `None` disables pose conditioning.
    pub pose_resolution: Option<(u32, u32)>,
    pub prompt_overrides: BTreeMap<usize, Embedding>,
    pub pose_overrides: BTreeMap<usize, PoseSkeleton>,
}

impl PairConditioning {
    /// Plain text conditioning, same prompt at both ends, no pose.
    pub fn from_prompts(backend: &dyn Backend, positive: &str, negative: &str, guidance_scale: f64) -> Result<Self> {
        let pos = backend.encode_text(positive)?;
        Ok(Self {
            positive_a: pos.clone(),
            positive_b: pos,
            negative: backend.encode_text(negative)?,
            guidance_scale,
            pose_a: None,
            pose_b: None,
            pose_conf_floor: crate::pose::DEFAULT_CONF_FLOOR,
            pose_resolution: None,
            prompt_overrides: BTreeMap::new(),
            pose_overrides: BTreeMap::new(),
        })
    }

    fn positive(&self, index: usize, position: f64) -> Result<Embedding> {
        if let Some(e) = self.prompt_overrides.get(&index) {
            return Ok(e.clone());
        }
        let (a, b) = (&self.positive_a.values, &self.positive_b.values);
        let values = match slerp(a, b, position) {
            Err(Error::ZeroNorm) => lerp(a, b, position)?,
            other => other?,
        };
        self.positive_a.with_values(values)
    }

    /// The pose used for frame `index`, if any.
    pub fn pose(&self, index: usize, position: f64) -> Option<PoseSkeleton> {
        if let Some(p) = self.pose_overrides.get(&index) {
            return Some(p.clone());
        }
        match (&self.pose_a, &self.pose_b) {
            (Some(a), Some(b)) => interpolate_pose(a, b, position, self.pose_conf_floor),
            _ => None,
        }
    }
}

impl ConditioningProvider for PairConditioning {
    fn conditioning(&self, index: usize, position: f64) -> Result<ConditioningBundle> {
        let pose_image = match self.pose_resolution {
            Some((w, h)) => match self.pose(index, position) {
                Some(s) if !s.is_empty() => Some(render_pose(&s, w, h)?.image),
                _ => None,
            },
            None => None,
        };
        Ok(ConditioningBundle {
            positive: self.positive(index, position)?,
            negative: self.negative.clone(),
            pose_image,
            guidance_scale: self.guidance_scale,
        })
    }
}

/// All candidates generated for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutput {
    pub node: FrameNode,
    /// Clean candidate latents, rounded through `f32`.
    pub latents: Vec<Latent>,
    pub images: Vec<Image>,
    pub candidates: CandidateSet,
}

impl NodeOutput {
    pub fn selected_latent(&self) -> &Latent {
        &self.latents[self.candidates.selected.unwrap_or(0)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub latent: Latent,
    pub image: Image,
}

/// Intermediate latents of the baselines, exposed for inspection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Inputs after noising, before any interpolation.
    pub noised_inputs: Option<(Latent, Latent)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub scheme: Scheme,
    pub frames: Vec<Frame>,
    pub nodes: BTreeMap<usize, NodeOutput>,
    pub diagnostics: Diagnostics,
}

impl FrameSequence {
    pub fn images(&self) -> Vec<&Image> {
        self.frames.iter().map(|f| &f.image).collect()
    }
}

/// Warps the upper parent by the fraction `node.weight` of the run's motion.
pub fn apply_motion(parent_hi: &Latent, xf: &AffineTransform, node: &FrameNode) -> Result<Latent> {
    warp_latent(parent_hi, &xf.powf(node.weight)?)
}

/// Produces every candidate of `node`: both parents are noised with the
/// same keyed noise to the node's timestep, slerped at the node's weight,
/// and denoised to a clean latent under `cond`. With several candidates and
/// ranking prompts configured, the best net score is selected; otherwise
/// candidate 0.
pub fn generate_frame(
    node: &FrameNode,
    frames: &FrameStore,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    cond: &ConditioningBundle,
    config: &GenerationConfig,
) -> Result<NodeOutput> {
    let lo = frames.get(&node.parent_lo).ok_or(Error::MissingParent(node.parent_lo))?;
    let hi = frames.get(&node.parent_hi).ok_or(Error::MissingParent(node.parent_hi))?;
    let (h, w) = (lo.shape().1, lo.shape().2);
    let hi = match &config.motion {
        Some(m) => apply_motion(hi, &m.transform(h, w)?, node)?,
        None => hi.clone(),
    };
    cond.validate(backend.caps())?;
    let substeps = config.substeps_from(node.timestep);
    let mut latents = Vec::with_capacity(config.num_candidates);
    let mut images = Vec::with_capacity(config.num_candidates);
    for c in 0..config.num_candidates {
        let eps = node_noise(config.global_seed, node, c, lo.shape());
        let za = schedule.forward_diffuse(lo, node.timestep, &eps)?;
        let zb = schedule.forward_diffuse(&hi, node.timestep, &eps)?;
        let mixed = slerp(za.as_slice(), zb.as_slice(), node.weight)?;
        let zt = Latent::new(crate::diffusion::latent::from_flat(lo.shape(), mixed)?, node.timestep)?;
        let z0 = ddim_denoise(&zt, 0, cond, backend, schedule, substeps)?.quantized();
        images.push(backend.decode_latent(&z0)?);
        latents.push(z0);
    }
    let mut candidates = CandidateSet::new(node.index, config.num_candidates);
    match &config.ranking {
        Some(prompts) if config.num_candidates > 1 => {
            candidates.score_all(&images, prompts, backend)?;
            select_best(&mut candidates)?;
        }
        _ => candidates.select_default(0)?,
    }
    Ok(NodeOutput {
        node: node.clone(),
        latents,
        images,
        candidates,
    })
}

/// Inputs resized to the backend's image size and encoded.
pub(crate) fn encode_inputs(a: &Image, b: &Image, backend: &dyn Backend) -> Result<(Latent, Latent)> {
    let (w, h) = backend.caps().image_size;
    let za = backend.encode_image(&a.resized(w, h))?;
    let zb = backend.encode_image(&b.resized(w, h))?;
    Ok((za, zb))
}

/// Endpoint frames: the inputs through the codec only.
pub(crate) fn endpoint_frames(za: &Latent, zb: &Latent, n: usize, backend: &dyn Backend) -> Result<(Frame, Frame)> {
    Ok((
        Frame {
            index: 0,
            latent: za.clone(),
            image: backend.decode_latent(za)?,
        },
        Frame {
            index: n,
            latent: zb.clone(),
            image: backend.decode_latent(zb)?,
        },
    ))
}

/// Runs the branching scheme end to end in memory. Nodes are generated
/// level by level, each after both of its parents are final.
pub fn run_interpolation(
    image_a: &Image,
    image_b: &Image,
    config: &GenerationConfig,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
) -> Result<FrameSequence> {
    config.validate()?;
    let schedule = config.schedule()?;
    let tree = config.tree()?;
    let (za, zb) = encode_inputs(image_a, image_b, backend)?;
    run_tree(&za, &zb, &tree, config, &schedule, backend, cond, &BTreeMap::new())
}

/// Generates every node of `tree` from encoded inputs, honoring any
/// per-node candidate choices in `selections`.
#[allow(clippy::too_many_arguments)]
pub fn run_tree(
    za: &Latent,
    zb: &Latent,
    tree: &InterpolationTree,
    config: &GenerationConfig,
    schedule: &NoiseSchedule,
    backend: &dyn Backend,
    cond: &dyn ConditioningProvider,
    selections: &BTreeMap<usize, usize>,
) -> Result<FrameSequence> {
    let n = tree.num_frames;
    let positions = config.positions();
    let mut store = FrameStore::new();
    store.insert(0, za.clone());
    store.insert(n, zb.clone());
    let mut nodes = BTreeMap::new();
    for node in &tree.nodes {
        let bundle = cond.conditioning(node.index, positions[node.index])?;
        let mut out = generate_frame(node, &store, backend, schedule, &bundle, config)?;
        if let Some(&pick) = selections.get(&node.index) {
            let (set, _) = crate::ranking::apply_user_selection(&out.candidates, pick, tree)?;
            out.candidates = set;
        }
        store.insert(node.index, out.selected_latent().clone());
        nodes.insert(node.index, out);
    }
    let (first, last) = endpoint_frames(za, zb, n, backend)?;
    let mut frames = vec![first];
    for i in 1..n {
        let out = &nodes[&i];
        let k = out.candidates.selected.unwrap_or(0);
        frames.push(Frame {
            index: i,
            latent: out.latents[k].clone(),
            image: out.images[k].clone(),
        });
    }
    frames.push(last);
    Ok(FrameSequence {
        scheme: Scheme::Ours,
        frames,
        nodes,
        diagnostics: Diagnostics::default(),
    })
}
