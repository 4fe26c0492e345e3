//! Uniform interface over the pretrained models the pipeline consumes.
//!
//! A [`Backend`] bundles the latent codec, the conditional noise predictor,
//! the text encoder, the image-text scorer and the pose extractor. The
//! pipeline never reaches past this trait, so the analytic [`ToyBackend`]
//! and the out-of-process [`ProcessBackend`] are interchangeable.

mod image;
mod process;
mod toy;

use serde::{Deserialize, Serialize};

pub use self::image::Image;
pub use self::process::{ProcessBackend, WORKER_ENV, WEIGHTS_ENV};
pub use self::toy::{ToyBackend, ToyConfig};
use crate::diffusion::{Latent, Noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pose::PoseSkeleton;

/// Default classifier-free guidance weight.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

/// A prompt embedding: a flat vector with a declared logical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![values.len()],
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.shape.clone(), values)
    }
}

/// Whether a backend tolerates concurrent inference calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Concurrent,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCaps {
    /// `(channels, height, width)`.
    pub latent_shape: (usize, usize, usize),
    /// Input/output image size as `(width, height)`.
    pub image_size: (u32, u32),
    pub embedding_shape: Vec<usize>,
    pub supports_pose: bool,
    /// Size of pose conditioning images as `(width, height)`.
    pub pose_resolution: (u32, u32),
    pub supports_grad_wrt_embedding: bool,
    pub capacity: Capacity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub positive: Embedding,
    pub negative: Embedding,
    pub pose_image: Option<Image>,
    pub guidance_scale: f64,
}

impl ConditioningBundle {
    pub fn unguided(embedding: Embedding) -> Self {
        Self {
            negative: embedding.clone(),
            positive: embedding,
            pose_image: None,
            guidance_scale: 1.0,
        }
    }

    pub fn validate(&self, caps: &BackendCaps) -> Result<()> {
        for e in [&self.positive, &self.negative] {
            if e.shape != caps.embedding_shape {
                return Err(Error::ShapeMismatch {
                    expected: caps.embedding_shape.clone(),
                    actual: e.shape.clone(),
                });
            }
        }
        if let Some(pose) = &self.pose_image {
            if !caps.supports_pose {
                return Err(Error::Unsupported("pose conditioning"));
            }
            if pose.size() != caps.pose_resolution {
                return Err(Error::ShapeMismatch {
                    expected: vec![caps.pose_resolution.0 as usize, caps.pose_resolution.1 as usize],
                    actual: vec![pose.width() as usize, pose.height() as usize],
                });
            }
        }
        if self.guidance_scale.is_nan() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {} must be nonnegative",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// The model surface consumed by the pipeline. Implementations must be
/// referentially transparent: identical inputs give identical outputs.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn caps(&self) -> &BackendCaps;

    fn encode_image(&self, image: &Image) -> Result<Latent>;

    fn decode_latent(&self, z: &Latent) -> Result<Image>;

    /// Noise prediction under a single text embedding (no guidance). The
    /// timestep is `z.timestep`.
    fn predict_noise_conditional(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
    ) -> Result<Noise>;

    /// Vector-Jacobian product of [`Backend::predict_noise_conditional`] with
    /// respect to the embedding: returns `J^T cotangent`.
    fn embedding_vjp(
        &self,
        _z: &Latent,
        _embedding: &Embedding,
        _pose: Option<&Image>,
        _schedule: &NoiseSchedule,
        _cotangent: &Noise,
    ) -> Result<Vec<f64>> {
        Err(Error::Unsupported("gradients with respect to the prompt embedding"))
    }

    /// Deterministic embedding of `prompt`; the empty prompt maps to the
    /// backend's null embedding.
    fn encode_text(&self, prompt: &str) -> Result<Embedding>;

    /// Image-text similarity in `[-1, 1]`.
    fn clip_similarity(&self, image: &Image, prompt: &str) -> Result<f64>;

    /// `Ok(None)` means no pose was found; errors are reserved for the
    /// extractor being unavailable.
    fn extract_pose(&self, image: &Image) -> Result<Option<PoseSkeleton>>;

    /// Guided noise prediction `eps_neg + g * (eps_pos - eps_neg)`.
    fn predict_noise(&self, z: &Latent, cond: &ConditioningBundle, schedule: &NoiseSchedule) -> Result<Noise> {
        if z.timestep == 0 {
            return Err(Error::InvalidTimestep("noise prediction needs t >= 1".into()));
        }
        cond.validate(self.caps())?;
        let pose = cond.pose_image.as_ref();
        let eps_pos = self.predict_noise_conditional(z, &cond.positive, pose, schedule)?;
        if cond.positive == cond.negative {
            return Ok(eps_pos);
        }
        let eps_neg = self.predict_noise_conditional(z, &cond.negative, pose, schedule)?;
        let g = cond.guidance_scale;
        let mut out = eps_neg;
        out.zip_mut_with(&eps_pos, |n, p| *n += g * (p - *n));
        Ok(out)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn caps(&self) -> &BackendCaps {
        (**self).caps()
    }
    fn encode_image(&self, image: &Image) -> Result<Latent> {
        (**self).encode_image(image)
    }
    fn decode_latent(&self, z: &Latent) -> Result<Image> {
        (**self).decode_latent(z)
    }
    fn predict_noise_conditional(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
    ) -> Result<Noise> {
        (**self).predict_noise_conditional(z, embedding, pose, schedule)
    }
    fn embedding_vjp(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
        cotangent: &Noise,
    ) -> Result<Vec<f64>> {
        (**self).embedding_vjp(z, embedding, pose, schedule, cotangent)
    }
    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        (**self).encode_text(prompt)
    }
    fn clip_similarity(&self, image: &Image, prompt: &str) -> Result<f64> {
        (**self).clip_similarity(image, prompt)
    }
    fn extract_pose(&self, image: &Image) -> Result<Option<PoseSkeleton>> {
        (**self).extract_pose(image)
    }
    fn predict_noise(&self, z: &Latent, cond: &ConditioningBundle, schedule: &NoiseSchedule) -> Result<Noise> {
        (**self).predict_noise(z, cond, schedule)
    }
}

/// Builds a backend by name, as used in project configs and CLI flags.
pub fn backend_by_name(name: &str) -> Result<std::sync::Arc<dyn Backend>> {
    match name {
        "toy" => Ok(std::sync::Arc::new(ToyBackend::new(ToyConfig::default()))),
        "process" => Ok(std::sync::Arc::new(ProcessBackend::from_env()?)),
        other => Err(Error::InvalidConfig(format!("unknown backend {other:?}"))),
    }
}
