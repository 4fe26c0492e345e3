//! Textual inversion: fit a prompt embedding to an image by gradient
//! descent on the denoiser's noise-prediction error at random noise levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Embedding};
use crate::diffusion::{Latent, Noise, NoiseSchedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    /// Zero returns the initial embedding unchanged.
    pub iterations: usize,
    pub learning_rate: f64,
    /// `(t, eps)` samples averaged per iteration.
    pub batch_timesteps: usize,
    pub seed: u64,
    /// Inclusive range timesteps are drawn from; the full `[1, T]` when absent.
    pub timestep_range: Option<(u32, u32)>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            learning_rate: 1e-4,
            batch_timesteps: 1,
            seed: 0,
            timestep_range: None,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_timesteps == 0 {
            return Err(Error::InvalidConfig("batch_timesteps must be positive".into()));
        }
        let (lo, hi) = self.range(schedule);
        if lo == 0 || lo > hi || hi > schedule.num_steps() {
            return Err(Error::InvalidConfig(format!("timestep range [{lo}, {hi}] invalid")));
        }
        Ok(())
    }

    fn range(&self, schedule: &NoiseSchedule) -> (u32, u32) {
        self.timestep_range.unwrap_or((1, schedule.num_steps()))
    }
}

/// The embedding after optimization together with the loss seen at every
/// iteration (before its update).
#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub embedding: Embedding,
    pub losses: Vec<f64>,
}

/// `eps_hat(alpha_t z0 + sigma_t eps; t, c) - eps` and the noised latent.
fn residual(
    c: &Embedding,
    z0: &Latent,
    t: u32,
    eps: &Noise,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
) -> Result<(Latent, Noise)> {
    if c.shape != backend.caps().embedding_shape {
        return Err(Error::ShapeMismatch {
            expected: backend.caps().embedding_shape.clone(),
            actual: c.shape.clone(),
        });
    }
    let zt = schedule.forward_diffuse(z0, t, eps)?;
    let mut r = backend.predict_noise_conditional(&zt, c, None, schedule)?;
    r -= eps;
    Ok((zt, r))
}

fn l2(r: &Noise) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Euclidean norm of the noise-prediction residual.
pub fn inversion_loss(
    c: &Embedding,
    z0: &Latent,
    t: u32,
    eps: &Noise,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(l2(&residual(c, z0, t, eps, backend, schedule)?.1))
}

/// The objective the optimizer descends: `0.5 * inversion_loss^2`. It has
/// the same minimizer as the norm but stays smooth where the residual
/// vanishes.
pub fn inversion_objective(
    c: &Embedding,
    z0: &Latent,
    t: u32,
    eps: &Noise,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let l = inversion_loss(c, z0, t, eps, backend, schedule)?;
    Ok(0.5 * l * l)
}

/// Gradient of [`inversion_objective`], `J^T r`, together with the loss.
fn loss_and_gradient(
    c: &Embedding,
    z0: &Latent,
    t: u32,
    eps: &Noise,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let (zt, r) = residual(c, z0, t, eps, backend, schedule)?;
    let g = backend.embedding_vjp(&zt, c, None, schedule, &r)?;
    Ok((l2(&r), g))
}

/// Gradient of [`inversion_objective`] with respect to the embedding.
pub fn inversion_gradient(
    c: &Embedding,
    z0: &Latent,
    t: u32,
    eps: &Noise,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(c, z0, t, eps, backend, schedule)?.1)
}

fn sample_noise(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Noise {
    Noise::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Optimizes the whole embedding against one image. See [`invert_shared`].
pub fn invert_prompt(
    initial: &Embedding,
    z0: &Latent,
    cfg: &InversionConfig,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
) -> Result<InversionResult> {
    invert_shared(initial, &[z0], cfg, backend, schedule)
}

/// Plain gradient descent on the mean over `targets` of
/// [`inversion_objective`]. Each iteration draws `batch_timesteps` fresh
/// `(t, eps)` pairs per target from a generator seeded by `cfg.seed`.
pub fn invert_shared(
    initial: &Embedding,
    targets: &[&Latent],
    cfg: &InversionConfig,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
) -> Result<InversionResult> {
    cfg.validate(schedule)?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no inversion targets".into()));
    }
    if cfg.iterations > 0 && !backend.caps().supports_grad_wrt_embedding {
        return Err(Error::Unsupported("gradients with respect to the prompt embedding"));
    }
    let (lo, hi) = cfg.range(schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut c = initial.clone();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let count = (cfg.batch_timesteps * targets.len()) as f64;
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0; c.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_timesteps {
            for z0 in targets {
                let t = rng.random_range(lo..=hi);
                let eps = sample_noise(&mut rng, z0.shape());
                let (l, g) = loss_and_gradient(&c, z0, t, &eps, backend, schedule)?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        losses.push(loss / count);
        let step = cfg.learning_rate / count;
        c.values.iter_mut().zip(&grad).for_each(|(v, g)| *v -= step * g);
        if c.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding diverged during inversion"));
        }
    }
    Ok(InversionResult { embedding: c, losses })
}

/// Largest relative disagreement between [`inversion_gradient`] and central
/// differences of [`inversion_objective`] with step `h`, over `coords`
/// randomly chosen embedding coordinates.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    c: &Embedding,
    z0: &Latent,
    t: u32,
    eps: &Noise,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    let analytic = inversion_gradient(c, z0, t, eps, backend, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords.min(c.len()) {
        let k = rng.random_range(0..c.len());
        let mut plus = c.clone();
        plus.values[k] += h;
        let mut minus = c.clone();
        minus.values[k] -= h;
        let fd = (inversion_objective(&plus, z0, t, eps, backend, schedule)?
            - inversion_objective(&minus, z0, t, eps, backend, schedule)?)
            / (2.0 * h);
        let scale = analytic[k].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((analytic[k] - fd).abs() / scale);
    }
    Ok(worst)
}
