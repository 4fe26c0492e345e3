//! On-disk projects: a directory of JSON and PNG files plus raw latent
//! caches, driven by a [`Session`].
//!
//! ```text
//! project.json                    Project state
//! config.json                     optional overrides of GenerationConfig
//! inputs/input_a.png, input_b.png inputs at the backend's resolution
//! frames/frame_0000.png ...       selected frames in order
//! candidates/node_0004/cand_00.png
//! latents/node_0004_cand_00.lat
//! poses/input_a.json, node_0004.json
//! report.json
//! ```

mod evaluate;
mod latent_io;
mod session;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use evaluate::evaluate_projects;
pub use latent_io::{decode_latent, encode_latent, read_latent, write_latent};
pub use session::{export_frames_zip, stale_nodes, GenerateSummary, NodeFilter, Session};

use crate::backend::Embedding;
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use crate::pose::PoseSkeleton;
use crate::ranking::CandidateSet;
use crate::tree::{GenerationConfig, InterpolationTree};

pub const PROJECT_FILE: &str = "project.json";
pub const CONFIG_OVERRIDE_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const INPUT_FILES: [&str; 2] = ["inputs/input_a.png", "inputs/input_b.png"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prompts {
    pub positive: String,
    pub negative: String,
}

/// Conditioning embeddings of the pair: one positive per input and the
/// shared negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEmbeddings {
    pub positive_a: Embedding,
    pub positive_b: Embedding,
    pub negative: Embedding,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputPoses {
    /// Whether extraction has run (both results may still be absent).
    pub extracted: bool,
    pub a: Option<PoseSkeleton>,
    pub b: Option<PoseSkeleton>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    /// Incremented by every mutation; clients use it to detect stale writes.
    pub version: u64,
    pub backend: String,
    /// Input images relative to the project directory.
    pub inputs: [String; 2],
    /// Content digests of the inputs.
    pub input_digests: [String; 2],
    pub prompts: Prompts,
    pub config: GenerationConfig,
    /// When absent the encoded prompts are used without inversion.
    pub inversion: Option<InversionConfig>,
    pub embeddings: Option<PairEmbeddings>,
    pub poses: InputPoses,
    pub tree: Option<InterpolationTree>,
    pub candidates: BTreeMap<usize, CandidateSet>,
    /// User candidate choices by node.
    pub selections: BTreeMap<usize, usize>,
    pub prompt_overrides: BTreeMap<usize, String>,
    pub pose_overrides: BTreeMap<usize, PoseSkeleton>,
    /// Cache key each node's stored candidates were generated under.
    pub finalized: BTreeMap<usize, String>,
    /// Cache key of the last completed baseline run.
    #[serde(default)]
    pub baseline_key: Option<String>,
}

impl Project {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PROJECT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let p: Project = serde_json::from_str(&text)?;
        p.validate(dir)?;
        Ok(p)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(PROJECT_FILE), text.as_bytes())
    }

    pub fn validate(&self, dir: &Path) -> Result<()> {
        self.config.validate()?;
        for input in &self.inputs {
            let path = dir.join(input);
            if !path.is_file() {
                return Err(Error::InvalidConfig(format!("missing input {}", path.display())));
            }
        }
        if let Some(tree) = &self.tree {
            tree.validate()?;
            if tree.num_frames != self.config.num_frames {
                return Err(Error::InvalidConfig("tree does not match configured frame count".into()));
            }
        }
        for (&node, &cand) in &self.selections {
            let set = self.candidates.get(&node).ok_or(Error::UnknownNode(node))?;
            set.get(cand).ok_or(Error::UnknownCandidate(cand))?;
        }
        for s in self.pose_overrides.values() {
            s.validate()?;
        }
        Ok(())
    }

    /// The selected candidate of `node`: the user's pick, else the stored one.
    pub fn selected(&self, node: usize) -> Option<usize> {
        self.selections
            .get(&node)
            .copied()
            .or_else(|| self.candidates.get(&node).and_then(|c| c.selected))
    }
}

pub fn frame_path(index: usize) -> String {
    format!("frames/frame_{index:04}.png")
}

pub fn candidate_path(node: usize, cand: usize) -> String {
    format!("candidates/node_{node:04}/cand_{cand:02}.png")
}

pub fn candidate_latent_path(node: usize, cand: usize) -> String {
    format!("latents/node_{node:04}_cand_{cand:02}.lat")
}

pub fn node_pose_path(node: usize) -> String {
    format!("poses/node_{node:04}.json")
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..16])
}

/// Applies the keys of `dir/config.json`, when present, over `config`.
pub fn apply_config_override(dir: &Path, config: GenerationConfig) -> Result<GenerationConfig> {
    let path = dir.join(CONFIG_OVERRIDE_FILE);
    if !path.is_file() {
        return Ok(config);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let overrides: serde_json::Value = serde_json::from_str(&text)?;
    let serde_json::Value::Object(overrides) = overrides else {
        return Err(Error::InvalidConfig(format!("{} must hold a JSON object", path.display())));
    };
    let mut base = serde_json::to_value(&config)?;
    let obj = base.as_object_mut().expect("config serializes to an object");
    for (k, v) in overrides {
        if !obj.contains_key(&k) {
            return Err(Error::InvalidConfig(format!("unknown config key {k:?} in {}", path.display())));
        }
        obj.insert(k, v);
    }
    let merged: GenerationConfig = serde_json::from_value(base)?;
    merged.validate()?;
    Ok(merged)
}
