use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::interp::lerp_scalar;
use crate::error::{Error, Result};

/// Joints of the 18-keypoint body model, in the detector's index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    Nose,
    Neck,
    RightShoulder,
    RightElbow,
    RightWrist,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    RightHip,
    RightKnee,
    RightAnkle,
    LeftHip,
    LeftKnee,
    LeftAnkle,
    RightEye,
    LeftEye,
    RightEar,
    LeftEar,
}

impl Joint {
    pub const ALL: [Joint; 18] = [
        Joint::Nose,
        Joint::Neck,
        Joint::RightShoulder,
        Joint::RightElbow,
        Joint::RightWrist,
        Joint::LeftShoulder,
        Joint::LeftElbow,
        Joint::LeftWrist,
        Joint::RightHip,
        Joint::RightKnee,
        Joint::RightAnkle,
        Joint::LeftHip,
        Joint::LeftKnee,
        Joint::LeftAnkle,
        Joint::RightEye,
        Joint::LeftEye,
        Joint::RightEar,
        Joint::LeftEar,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::Nose => "nose",
            Joint::Neck => "neck",
            Joint::RightShoulder => "right_shoulder",
            Joint::RightElbow => "right_elbow",
            Joint::RightWrist => "right_wrist",
            Joint::LeftShoulder => "left_shoulder",
            Joint::LeftElbow => "left_elbow",
            Joint::LeftWrist => "left_wrist",
            Joint::RightHip => "right_hip",
            Joint::RightKnee => "right_knee",
            Joint::RightAnkle => "right_ankle",
            Joint::LeftHip => "left_hip",
            Joint::LeftKnee => "left_knee",
            Joint::LeftAnkle => "left_ankle",
            Joint::RightEye => "right_eye",
            Joint::LeftEye => "left_eye",
            Joint::RightEar => "right_ear",
            Joint::LeftEar => "left_ear",
        }
    }
}

impl fmt::Display for Joint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Joint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Joint::ALL
            .into_iter()
            .find(|j| j.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown joint {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Normalized image coordinates, `(0, 0)` top-left, `(1, 1)` bottom-right.
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Result<Self> {
        let kp = Self { x, y, confidence };
        kp.validate()?;
        Ok(kp)
    }

    fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.x) || !unit.contains(&self.y) {
            return Err(Error::InvalidArgument(format!(
                "keypoint ({}, {}) outside the unit square",
                self.x, self.y
            )));
        }
        if !unit.contains(&self.confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    Detected,
    FallbackTranslated,
    #[default]
    UserOverride,
}

/// A single subject's pose. Serialized as
/// `{"source": "...", "keypoints": {"nose": {"x": .., "y": .., "confidence": ..}, ..}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSkeleton {
    #[serde(default)]
    pub source: PoseSource,
    pub keypoints: BTreeMap<Joint, Keypoint>,
}

impl PoseSkeleton {
    pub fn new(source: PoseSource) -> Self {
        Self {
            source,
            keypoints: BTreeMap::new(),
        }
    }

    pub fn with(mut self, joint: Joint, x: f64, y: f64, confidence: f64) -> Result<Self> {
        self.keypoints.insert(joint, Keypoint::new(x, y, confidence)?);
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.keypoints.is_empty() {
            return 0.0;
        }
        self.keypoints.values().map(|k| k.confidence).sum::<f64>() / self.keypoints.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.keypoints.values().try_for_each(Keypoint::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: PoseSkeleton = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeletons always serialize")
    }
}

/// Joints present in both skeletons with confidence at or above `conf_floor`
/// in each.
pub fn shared_keypoints(a: &PoseSkeleton, b: &PoseSkeleton, conf_floor: f64) -> BTreeSet<Joint> {
    a.keypoints
        .iter()
        .filter(|(_, k)| k.confidence >= conf_floor)
        .filter(|(j, _)| {
            b.keypoints
                .get(j)
                .is_some_and(|k| k.confidence >= conf_floor)
        })
        .map(|(j, _)| *j)
        .collect()
}

/// Linear interpolation of the shared keypoints. Joints seen in only one
/// skeleton are dropped. Returns `None` when nothing is shared.
pub fn interpolate_pose(
    a: &PoseSkeleton,
    b: &PoseSkeleton,
    u: f64,
    conf_floor: f64,
) -> Option<PoseSkeleton> {
    let shared = shared_keypoints(a, b, conf_floor);
    if shared.is_empty() {
        return None;
    }
    let keypoints = shared
        .into_iter()
        .map(|j| {
            let (ka, kb) = (a.keypoints[&j], b.keypoints[&j]);
            let kp = Keypoint {
                x: lerp_scalar(ka.x, kb.x, u),
                y: lerp_scalar(ka.y, kb.y, u),
                confidence: ka.confidence.min(kb.confidence),
            };
            (j, kp)
        })
        .collect();
    Some(PoseSkeleton {
        source: if a.source == b.source {
            a.source
        } else {
            PoseSource::UserOverride
        },
        keypoints,
    })
}
