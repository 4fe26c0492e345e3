use super::skeleton::{PoseSkeleton, PoseSource};
use crate::backend::{Backend, ConditioningBundle, Image};
use crate::diffusion::{ddim_denoise, NoiseSchedule};
use crate::error::Result;
use crate::tree::noise::keyed_noise;

/// Default minimum confidence for a keypoint (or a whole detection) to count.
pub const DEFAULT_CONF_FLOOR: f64 = 0.4;

/// Noise stream reserved for the style translation, disjoint from node keys.
const TRANSLATION_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FallbackConfig {
    pub conf_floor: f64,
    /// Fraction of the schedule the image is noised to before re-denoising.
    pub strength: f64,
    pub prompt: String,
    pub substeps: u32,
    pub seed: u64,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self {
            conf_floor: DEFAULT_CONF_FLOOR,
            strength: 0.5,
            prompt: "a photograph of a person".into(),
            substeps: 50,
            seed: 0,
        }
    }
}

fn accept(found: Option<PoseSkeleton>, floor: f64, source: PoseSource) -> Option<PoseSkeleton> {
    found
        .filter(|s| !s.is_empty() && s.mean_confidence() >= floor)
        .map(|mut s| {
            s.source = source;
            s
        })
}

/// Image-to-image translation toward the fallback prompt's style.
pub fn translate_image(
    image: &Image,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    cfg: &FallbackConfig,
) -> Result<Image> {
    let (w, h) = backend.caps().image_size;
    let z0 = backend.encode_image(&image.resized(w, h))?;
    let t = ((cfg.strength * schedule.num_steps() as f64).round() as u32).clamp(1, schedule.num_steps());
    let eps = keyed_noise(cfg.seed, TRANSLATION_STREAM, z0.shape());
    let zt = schedule.forward_diffuse(&z0, t, &eps)?;
    let cond = ConditioningBundle::unguided(backend.encode_text(&cfg.prompt)?);
    let z = ddim_denoise(&zt, 0, &cond, backend, schedule, cfg.substeps)?;
    backend.decode_latent(&z)
}

/// Runs the pose extractor, and when it finds nothing confident enough,
/// retries on a photographic translation of the image. Returns `None` when
/// both attempts fail; backend errors are propagated.
pub fn extract_pose_with_fallback(
    image: &Image,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    cfg: &FallbackConfig,
) -> Result<Option<PoseSkeleton>> {
    if let Some(s) = accept(backend.extract_pose(image)?, cfg.conf_floor, PoseSource::Detected) {
        return Ok(Some(s));
    }
    tracing::debug!("no confident pose; retrying on translated image");
    let translated = translate_image(image, backend, schedule, cfg)?;
    Ok(accept(
        backend.extract_pose(&translated)?,
        cfg.conf_floor,
        PoseSource::FallbackTranslated,
    ))
}
