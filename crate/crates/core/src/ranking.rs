//! Generate-and-select: candidates for a frame are scored by image-text
//! similarity against a positive and a negative prompt, and the best net
//! score wins unless a user picks otherwise.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Image};
use crate::error::{Error, Result};
use crate::tree::InterpolationTree;

pub const DEFAULT_POSITIVE_RANKING_PROMPT: &str = "high quality, detailed, 2D";
pub const DEFAULT_NEGATIVE_RANKING_PROMPT: &str = "blurry, distorted, 3D render";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPrompts {
    pub positive: String,
    pub negative: String,
}

impl Default for RankingPrompts {
    fn default() -> Self {
        Self {
            positive: DEFAULT_POSITIVE_RANKING_PROMPT.into(),
            negative: DEFAULT_NEGATIVE_RANKING_PROMPT.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub positive: f64,
    pub negative: f64,
    pub net: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Auto,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    /// Path of the decoded image, relative to the project directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Score>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub node_index: usize,
    pub candidates: Vec<Candidate>,
    pub selected: Option<usize>,
    pub selection_source: Option<SelectionSource>,
}

/// Scores one image with exactly two scorer calls.
pub fn score_candidate(image: &Image, positive: &str, negative: &str, scorer: &dyn Backend) -> Result<Score> {
    let pos = scorer.clip_similarity(image, positive)?;
    let neg = scorer.clip_similarity(image, negative)?;
    Ok(Score {
        positive: pos,
        negative: neg,
        net: pos - neg,
    })
}

impl CandidateSet {
    pub fn new(node_index: usize, count: usize) -> Self {
        Self {
            node_index,
            candidates: (0..count)
                .map(|id| Candidate {
                    id,
                    image: None,
                    score: None,
                })
                .collect(),
            selected: None,
            selection_source: None,
        }
    }

    pub fn get(&self, id: usize) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    /// Scores every candidate image; `images[k]` belongs to `candidates[k]`.
    pub fn score_all(&mut self, images: &[Image], prompts: &RankingPrompts, scorer: &dyn Backend) -> Result<()> {
        if images.len() != self.candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images for {} candidates",
                images.len(),
                self.candidates.len()
            )));
        }
        for (cand, image) in self.candidates.iter_mut().zip(images) {
            cand.score = Some(score_candidate(image, &prompts.positive, &prompts.negative, scorer)?);
        }
        Ok(())
    }

    /// Marks `id` as chosen without any scoring.
    pub fn select_default(&mut self, id: usize) -> Result<()> {
        if self.get(id).is_none() {
            return Err(Error::UnknownCandidate(id));
        }
        self.selected = Some(id);
        self.selection_source = Some(SelectionSource::Auto);
        Ok(())
    }

    pub fn selected_candidate(&self) -> Option<&Candidate> {
        self.selected.and_then(|id| self.get(id))
    }
}

/// Argmax of the net score, ties going to the lowest id. Records the choice
/// as automatic.
pub fn select_best(cands: &mut CandidateSet) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in &cands.candidates {
        let net = c.score.ok_or(Error::Unscored(c.id))?.net;
        match best {
            Some((id, b)) if net < b || (net == b && c.id > id) => {}
            _ => best = Some((c.id, net)),
        }
    }
    let (id, _) = best.ok_or(Error::EmptyCandidates)?;
    cands.selected = Some(id);
    cands.selection_source = Some(SelectionSource::Auto);
    Ok(id)
}

/// Records a user's pick and returns the frames that must be regenerated:
/// every descendant of the node, or nothing if the pick is unchanged.
pub fn apply_user_selection(
    cands: &CandidateSet,
    candidate_id: usize,
    tree: &InterpolationTree,
) -> Result<(CandidateSet, BTreeSet<usize>)> {
    if cands.get(candidate_id).is_none() {
        return Err(Error::UnknownCandidate(candidate_id));
    }
    let changed = cands.selected != Some(candidate_id);
    let mut out = cands.clone();
    out.selected = Some(candidate_id);
    out.selection_source = Some(SelectionSource::User);
    let invalidated = if changed {
        tree.descendants(cands.node_index)
    } else {
        BTreeSet::new()
    };
    Ok((out, invalidated))
}
