//! An analytic stand-in for a latent diffusion model.
//!
//! * The codec is the identity: a latent is the RGB image laid out as
//!   `(3, height, width)`.
//! * A prompt embeds to a constant color plane of latent shape; that plane is
//!   the mean of a Gaussian prior `N(m, prior_std^2 I)` over clean latents,
//!   and the noise predictor returns the exact posterior-mean prediction
//!   under that prior. With `prior_std = 0` the prior is degenerate and
//!   `eps(z_t) = (z_t - alpha_t m) / sigma_t`.
//! * Pose images shift the prior mean by `pose_strength * pose`.
//! * The scorer is the cosine between the image's mean color and the
//!   prompt's color; the pose extractor reads rendered marker images.

use ndarray::Array3;
use sha2::{Digest, Sha256};

use super::{Backend, BackendCaps, Capacity, Embedding, Image};
use crate::diffusion::latent::{check_shape, from_flat};
use crate::diffusion::{Latent, Noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pose::{detect_markers, PoseSkeleton};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub width: u32,
    pub height: u32,
    pub prior_std: f64,
    pub pose_strength: f64,
    pub supports_pose: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            prior_std: 0.5,
            pose_strength: 0.25,
            supports_pose: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    caps: BackendCaps,
}

const NAMED_COLORS: &[(&str, [f64; 3])] = &[
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("grey", [0.5, 0.5, 0.5]),
    ("orange", [1.0, 0.5, 0.0]),
    ("purple", [0.5, 0.0, 0.5]),
    ("pink", [1.0, 0.75, 0.8]),
    ("brown", [0.6, 0.3, 0.1]),
];

fn tokens(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn token_color(token: &str) -> [f64; 3] {
    if let Some((_, c)) = NAMED_COLORS.iter().find(|(name, _)| *name == token) {
        return *c;
    }
    let digest = Sha256::digest(token.as_bytes());
    [digest[0], digest[1], digest[2]].map(|b| b as f64 / 255.0)
}

/// Mean color of a prompt's tokens; `None` for a prompt without tokens.
pub(crate) fn prompt_color(prompt: &str) -> Option<[f64; 3]> {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for t in tokens(prompt) {
        let c = token_color(&t);
        for i in 0..3 {
            acc[i] += c[i];
        }
        n += 1;
    }
    (n > 0).then(|| acc.map(|v| v / n as f64))
}

fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Self {
        let (w, h) = (config.width as usize, config.height as usize);
        let caps = BackendCaps {
            latent_shape: (3, h, w),
            image_size: (config.width, config.height),
            embedding_shape: vec![3, h, w],
            supports_pose: config.supports_pose,
            pose_resolution: (config.width, config.height),
            supports_grad_wrt_embedding: true,
            capacity: Capacity::Concurrent,
        };
        Self { config, caps }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn image_to_array(&self, image: &Image) -> Array3<f64> {
        let (w, h) = image.size();
        Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            image.pixel(x as u32, y as u32)[c] as f64
        })
    }

    /// Prior mean for a given conditioning.
    fn prior_mean(&self, embedding: &Embedding, pose: Option<&Image>) -> Result<Array3<f64>> {
        if embedding.shape != self.caps.embedding_shape {
            return Err(Error::ShapeMismatch {
                expected: self.caps.embedding_shape.clone(),
                actual: embedding.shape.clone(),
            });
        }
        let mut m = from_flat(self.caps.latent_shape, embedding.values.clone())?;
        if let Some(pose) = pose {
            if !self.caps.supports_pose {
                return Err(Error::Unsupported("pose conditioning"));
            }
            if pose.size() != self.caps.pose_resolution {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.caps.pose_resolution.0 as usize, self.caps.pose_resolution.1 as usize],
                    actual: vec![pose.width() as usize, pose.height() as usize],
                });
            }
            let p = self.image_to_array(pose);
            let k = self.config.pose_strength;
            m.zip_mut_with(&p, |a, b| *a += k * b);
        }
        Ok(m)
    }

    /// `alpha * k` where `k` is the posterior shrinkage toward the noisy
    /// observation; zero for the degenerate prior.
    fn shrinkage(&self, alpha: f64, sigma: f64) -> f64 {
        let v = self.config.prior_std * self.config.prior_std;
        if v == 0.0 {
            return 0.0;
        }
        alpha * alpha * v / (alpha * alpha * v + sigma * sigma)
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn caps(&self) -> &BackendCaps {
        &self.caps
    }

    fn encode_image(&self, image: &Image) -> Result<Latent> {
        if image.size() != self.caps.image_size {
            return Err(Error::ShapeMismatch {
                expected: vec![self.caps.image_size.0 as usize, self.caps.image_size.1 as usize],
                actual: vec![image.width() as usize, image.height() as usize],
            });
        }
        Latent::clean(self.image_to_array(image))
    }

    fn decode_latent(&self, z: &Latent) -> Result<Image> {
        if z.timestep != 0 {
            return Err(Error::InvalidTimestep(format!(
                "can only decode clean latents, got timestep {}",
                z.timestep
            )));
        }
        check_shape(self.caps.latent_shape, z.shape())?;
        let (_, h, w) = z.shape();
        let mut data = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(z.data[[c, y, x]] as f32);
                }
            }
        }
        Image::from_raw(w as u32, h as u32, data)
    }

    fn predict_noise_conditional(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
    ) -> Result<Noise> {
        check_shape(self.caps.latent_shape, z.shape())?;
        let t = z.timestep;
        if t == 0 {
            return Err(Error::InvalidTimestep("noise prediction needs t >= 1".into()));
        }
        schedule.check_timestep(t)?;
        let m = self.prior_mean(embedding, pose)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let scale = (1.0 - self.shrinkage(a, s)) / s;
        let mut out = z.data.clone();
        out.zip_mut_with(&m, |zt, mi| *zt = scale * (*zt - a * mi));
        Ok(out)
    }

    fn embedding_vjp(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
        cotangent: &Noise,
    ) -> Result<Vec<f64>> {
        check_shape(self.caps.latent_shape, z.shape())?;
        check_shape(self.caps.latent_shape, cotangent.dim())?;
        self.prior_mean(embedding, pose)?;
        let t = z.timestep;
        schedule.check_timestep(t)?;
        if t == 0 {
            return Err(Error::InvalidTimestep("noise prediction needs t >= 1".into()));
        }
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let d = -a * (1.0 - self.shrinkage(a, s)) / s;
        Ok(cotangent.iter().map(|c| d * c).collect())
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        let shape = self.caps.embedding_shape.clone();
        let Some(color) = prompt_color(prompt) else {
            return Ok(Embedding::zeros(shape));
        };
        let plane = shape[1] * shape[2];
        let values = (0..3).flat_map(|c| std::iter::repeat_n(color[c], plane)).collect();
        Embedding::new(shape, values)
    }

    fn clip_similarity(&self, image: &Image, prompt: &str) -> Result<f64> {
        let Some(color) = prompt_color(prompt) else {
            return Ok(0.0);
        };
        Ok(cosine(image.mean_color(), color))
    }

    fn extract_pose(&self, image: &Image) -> Result<Option<PoseSkeleton>> {
        Ok(detect_markers(image))
    }
}
