#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use diffinterp::backend::{Backend, BackendCaps, Embedding, Image, ToyBackend, ToyConfig};
use diffinterp::diffusion::{Latent, Noise, NoiseSchedule};
use diffinterp::pose::{render_pose, PoseSkeleton};
use diffinterp::{Error, Result};

pub fn toy(size: u32) -> ToyBackend {
    ToyBackend::new(ToyConfig {
        width: size,
        height: size,
        ..ToyConfig::default()
    })
}

pub fn degenerate_toy(size: u32) -> ToyBackend {
    ToyBackend::new(ToyConfig {
        width: size,
        height: size,
        prior_std: 0.0,
        ..ToyConfig::default()
    })
}

/// Smooth colored pattern; `k` picks the phase so pairs differ. Values are
/// multiples of 1/255 so PNG round trips are exact.
pub fn pattern(size: u32, k: usize, dark: bool) -> Image {
    let tau = std::f64::consts::TAU;
    let scale = if dark { 0.45 } else { 1.0 };
    let mut data = Vec::with_capacity((size * size * 3) as usize);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let ph = k as f64 * 0.37;
            let rgb = [
                0.5 + 0.4 * (tau * (u + ph)).sin(),
                0.15 + 0.7 * v * (1.0 + 0.2 * (tau * 2.0 * u + ph).cos()) / 1.2,
                0.5 + 0.35 * (tau * (u * v + ph * 1.7)).cos(),
            ];
            for c in rgb {
                data.push(((c * scale).clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
            }
        }
    }
    Image::from_raw(size, size, data).unwrap()
}

/// `base` with the skeleton's markers painted over it.
pub fn with_pose(base: &Image, skeleton: &PoseSkeleton) -> Image {
    let (w, h) = base.size();
    let drawn = render_pose(skeleton, w, h).unwrap().image;
    let mut out = base.clone();
    for y in 0..h {
        for x in 0..w {
            let p = drawn.pixel(x, y);
            if p.iter().any(|&c| c > 0.0) {
                out.put_pixel(x, y, p);
            }
        }
    }
    out
}

pub fn flat(image: &Image) -> Vec<f32> {
    image.raw().to_vec()
}

/// Blocks noise predictions until opened.
#[derive(Default)]
pub struct Gate {
    open: Mutex<bool>,
    cv: Condvar,
}

impl Gate {
    pub fn closed() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn open(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }

    fn wait(&self) {
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
    }
}

pub type PoseHook = Box<dyn Fn(&Image) -> Option<PoseSkeleton> + Send + Sync>;

/// A toy backend with hooks: a scripted pose extractor and a budget of
/// noise predictions after which every call fails.
pub struct Hooked {
    pub inner: ToyBackend,
    pub pose: Option<PoseHook>,
    pub budget: Option<usize>,
    pub gate: Option<Arc<Gate>>,
    pub noise_calls: AtomicUsize,
    pub pose_calls: AtomicUsize,
}

impl Hooked {
    pub fn new(inner: ToyBackend) -> Self {
        Self {
            inner,
            pose: None,
            budget: None,
            gate: None,
            noise_calls: AtomicUsize::new(0),
            pose_calls: AtomicUsize::new(0),
        }
    }

    pub fn arc(self) -> Arc<dyn Backend> {
        Arc::new(self)
    }
}

impl Backend for Hooked {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn caps(&self) -> &BackendCaps {
        self.inner.caps()
    }

    fn encode_image(&self, image: &Image) -> Result<Latent> {
        self.inner.encode_image(image)
    }

    fn decode_latent(&self, z: &Latent) -> Result<Image> {
        self.inner.decode_latent(z)
    }

    fn predict_noise_conditional(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
    ) -> Result<Noise> {
        if let Some(g) = &self.gate {
            g.wait();
        }
        let n = self.noise_calls.fetch_add(1, Ordering::SeqCst);
        if self.budget.is_some_and(|b| n >= b) {
            return Err(Error::BackendUnavailable("simulated crash".into()));
        }
        self.inner.predict_noise_conditional(z, embedding, pose, schedule)
    }

    fn embedding_vjp(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
        cotangent: &Noise,
    ) -> Result<Vec<f64>> {
        self.inner.embedding_vjp(z, embedding, pose, schedule, cotangent)
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        self.inner.encode_text(prompt)
    }

    fn clip_similarity(&self, image: &Image, prompt: &str) -> Result<f64> {
        self.inner.clip_similarity(image, prompt)
    }

    fn extract_pose(&self, image: &Image) -> Result<Option<PoseSkeleton>> {
        self.pose_calls.fetch_add(1, Ordering::SeqCst);
        match &self.pose {
            Some(f) => Ok(f(image)),
            None => self.inner.extract_pose(image),
        }
    }
}
