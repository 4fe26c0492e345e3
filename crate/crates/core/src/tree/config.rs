use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::build::{build_tree, check_positions, InterpolationTree};
use crate::backend::DEFAULT_GUIDANCE_SCALE;
use crate::diffusion::{Motion, NoiseSchedule, ScheduleProfile};
use crate::error::{Error, Result};
use crate::pose::DEFAULT_CONF_FLOOR;
use crate::ranking::RankingPrompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ours,
    InterpolateOnly,
    InterpolateDenoise,
    Did,
    DidUnshared,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Ours,
        Scheme::InterpolateOnly,
        Scheme::InterpolateDenoise,
        Scheme::Did,
        Scheme::DidUnshared,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scheme::Ours => "ours",
            Scheme::InterpolateOnly => "interpolate_only",
            Scheme::InterpolateDenoise => "interpolate_denoise",
            Scheme::Did => "did",
            Scheme::DidUnshared => "did_unshared",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    /// Accepts both `interpolate_only` and `interpolate-only` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Scheme::ALL
            .into_iter()
            .find(|k| k.id() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub scheme: Scheme,
    pub num_frames: usize,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub num_steps: u32,
    pub profile: ScheduleProfile,
    pub num_candidates: usize,
    pub global_seed: u64,
    /// DDIM jumps used to denoise from the largest timestep to 0; shorter
    /// spans use proportionally fewer.
    pub substeps: u32,
    /// Per-frame positions `w_0 = 0 < w_1 < ... < w_N = 1`; uniform when absent.
    pub interpolation_weights: Option<Vec<f64>>,
    /// Number of tree levels; `ceil(log2 N)` when absent.
    pub levels: Option<usize>,
    pub branching: Option<Vec<usize>>,
    pub guidance_scale: f64,
    /// Prompts for automatic candidate ranking; without them candidate 0 is kept.
    pub ranking: Option<RankingPrompts>,
    pub motion: Option<Motion>,
    pub use_pose: bool,
    pub pose_conf_floor: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Ours,
            num_frames: 16,
            t_min_frac: 0.25,
            t_max_frac: 0.65,
            num_steps: 1000,
            profile: ScheduleProfile::default(),
            num_candidates: 4,
            global_seed: 0,
            substeps: 50,
            interpolation_weights: None,
            levels: None,
            branching: None,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            ranking: Some(RankingPrompts::default()),
            motion: None,
            use_pose: true,
            pose_conf_floor: DEFAULT_CONF_FLOOR,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.num_frames));
        }
        if !(0.0 < self.t_min_frac && self.t_min_frac <= self.t_max_frac && self.t_max_frac < 1.0) {
            return bad(format!(
                "noise window [{}, {}] must satisfy 0 < t_min <= t_max < 1",
                self.t_min_frac, self.t_max_frac
            ));
        }
        if self.num_steps == 0 {
            return bad("num_steps must be positive".into());
        }
        if self.num_candidates == 0 || self.num_candidates >= 1 << 16 {
            return bad(format!("num_candidates {} out of range", self.num_candidates));
        }
        if self.substeps == 0 {
            return bad("substeps must be positive".into());
        }
        if self.levels == Some(0) {
            return bad("levels must be positive".into());
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return bad(format!("guidance scale {} must be nonnegative", self.guidance_scale));
        }
        if !(0.0..=1.0).contains(&self.pose_conf_floor) {
            return bad(format!("pose confidence floor {} outside [0, 1]", self.pose_conf_floor));
        }
        if let Some(w) = &self.interpolation_weights {
            check_positions(w, self.num_frames)?;
        }
        self.timesteps()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.num_steps, self.profile)
    }

    /// Frame positions in `[0, 1]`.
    pub fn positions(&self) -> Vec<f64> {
        match &self.interpolation_weights {
            Some(w) => w.clone(),
            None => (0..=self.num_frames)
                .map(|i| i as f64 / self.num_frames as f64)
                .collect(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.unwrap_or_else(|| {
            let n = self.num_frames;
            (usize::BITS - (n - 1).leading_zeros()).max(1) as usize
        })
    }

    /// Integer bounds of the noise window.
    pub fn t_window(&self) -> (u32, u32) {
        let t = self.num_steps as f64;
        ((self.t_min_frac * t).round() as u32, (self.t_max_frac * t).round() as u32)
    }

    /// Tree timesteps, increasing.
    pub fn timesteps(&self) -> Result<Vec<u32>> {
        place_timesteps(self.num_levels(), self.t_min_frac, self.t_max_frac, self.num_steps)
    }

    pub fn tree(&self) -> Result<InterpolationTree> {
        let tree = build_tree(self.num_frames, &self.timesteps()?, self.branching.as_deref())?;
        match &self.interpolation_weights {
            Some(w) => tree.with_positions(w),
            None => Ok(tree),
        }
    }

    /// DDIM jumps for denoising from `t` to 0, proportional to the span.
    pub fn substeps_from(&self, t: u32) -> u32 {
        let frac = t as f64 / self.num_steps as f64;
        ((self.substeps as f64 * frac).ceil() as u32).max(1)
    }

    /// Stable digest of the configuration, used to key cached artifacts.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config always serializes");
        let hash = Sha256::digest(&json);
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `k` timesteps spaced evenly between `t_min_frac` and `t_max_frac` of the
/// schedule, rounded and increasing. A single level sits at the top of the
/// window.
pub fn place_timesteps(k: usize, t_min_frac: f64, t_max_frac: f64, num_steps: u32) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::InsufficientLevels("zero levels".into()));
    }
    let (lo, hi) = (t_min_frac * num_steps as f64, t_max_frac * num_steps as f64);
    let ts: Vec<u32> = if k == 1 {
        vec![hi.round() as u32]
    } else {
        (0..k)
            .map(|j| (lo + (hi - lo) * j as f64 / (k - 1) as f64).round() as u32)
            .collect()
    };
    if ts.windows(2).any(|w| w[0] >= w[1]) || ts[0] == 0 {
        return Err(Error::NonMonotoneTimesteps);
    }
    Ok(ts)
}

/// Noise level of frame `i` for the interpolate-denoise baseline: a
/// triangle peaking at `N/2`, falling to `t_min` at the endpoints.
pub fn frame_schedule(i: usize, n: usize, t_min: u32, t_max: u32) -> Result<u32> {
    if i == 0 || i >= n {
        return Err(Error::InvalidArgument(format!("frame {i} is not interior to 0..{n}")));
    }
    let dist = (2 * i).abs_diff(n) as f64 / n as f64;
    let t = t_min as f64 + (t_max as f64 - t_min as f64) * (1.0 - dist);
    Ok(t.round() as u32)
}
