use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One interior frame of the plan: which two frames it is mixed from, at
/// what noise level, and with what interpolation weight between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameNode {
    pub index: usize,
    pub parent_lo: usize,
    pub parent_hi: usize,
    pub timestep: u32,
    pub level: usize,
    pub noise_key: u64,
    pub weight: f64,
}

impl FrameNode {
    pub fn new(index: usize, parent_lo: usize, parent_hi: usize, timestep: u32, level: usize, weight: f64) -> Self {
        Self {
            index,
            parent_lo,
            parent_hi,
            timestep,
            level,
            noise_key: ((level as u64) << 48) | ((index as u64) << 16),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationTree {
    pub num_frames: usize,
    /// Increasing timesteps `t_1 < ... < t_K`; level `l` uses `t_{K-l}`.
    pub timesteps: Vec<u32>,
    /// Interior nodes ordered by level, then index.
    pub nodes: Vec<FrameNode>,
}

/// Split points of `(lo, hi)` into `b` parts with floor rounding.
fn split(lo: usize, hi: usize, b: usize) -> Vec<usize> {
    let len = hi - lo;
    let mut points: Vec<usize> = (1..b).map(|j| lo + j * len / b).filter(|&p| p > lo && p < hi).collect();
    points.dedup();
    points
}

/// Plans the branching interpolation over frames `0..=n`.
///
/// The root level mixes frames `0` and `n` at the largest timestep, and each
/// further level subdivides the gaps left by earlier levels at the next
/// lower timestep. By default every level bisects (floor rounding) and the
/// last available level fills all remaining gaps directly from the
/// bracketing frames. Explicit `branching` factors replace the default per
/// level; they must then cover every frame within the available levels.
pub fn build_tree(n: usize, timesteps: &[u32], branching: Option<&[usize]>) -> Result<InterpolationTree> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {n}")));
    }
    if timesteps.is_empty() {
        return Err(Error::InsufficientLevels("no timesteps given".into()));
    }
    if timesteps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::NonMonotoneTimesteps);
    }
    let k = timesteps.len();
    if let Some(b) = branching {
        if b.len() > k {
            return Err(Error::InvalidArgument(format!(
                "{} branching factors for {k} levels",
                b.len()
            )));
        }
        if let Some(bad) = b.iter().find(|&&f| f < 2) {
            return Err(Error::InvalidArgument(format!("branching factor {bad} < 2")));
        }
    }
    let mut nodes = Vec::with_capacity(n - 1);
    let mut intervals = vec![(0usize, n)];
    for level in 0..k {
        if intervals.is_empty() {
            break;
        }
        let t = timesteps[k - 1 - level];
        let mut next = Vec::new();
        for &(lo, hi) in &intervals {
            let factor = match branching {
                Some(b) => match b.get(level) {
                    Some(&f) => f,
                    None => break,
                },
                None if level == k - 1 => hi - lo,
                None => 2,
            };
            let points = split(lo, hi, factor);
            for &p in &points {
                let weight = (p - lo) as f64 / (hi - lo) as f64;
                nodes.push(FrameNode::new(p, lo, hi, t, level, weight));
            }
            let mut bounds = vec![lo];
            bounds.extend(&points);
            bounds.push(hi);
            next.extend(bounds.windows(2).map(|w| (w[0], w[1])).filter(|(a, b)| b - a >= 2));
        }
        intervals = next;
    }
    if !intervals.is_empty() {
        return Err(Error::InsufficientLevels(format!(
            "{} gaps remain after {k} levels",
            intervals.len()
        )));
    }
    nodes.sort_by_key(|n| (n.level, n.index));
    Ok(InterpolationTree {
        num_frames: n,
        timesteps: timesteps.to_vec(),
        nodes,
    })
}

impl InterpolationTree {
    pub fn node(&self, index: usize) -> Option<&FrameNode> {
        self.nodes.iter().find(|n| n.index == index)
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level + 1).max().unwrap_or(0)
    }

    pub fn level(&self, level: usize) -> impl Iterator<Item = &FrameNode> {
        self.nodes.iter().filter(move |n| n.level == level)
    }

    /// Every node whose ancestry passes through `index`.
    pub fn descendants(&self, index: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        // nodes are sorted by level, so parents are always seen first
        for node in &self.nodes {
            if [node.parent_lo, node.parent_hi]
                .iter()
                .any(|p| *p == index || out.contains(p))
            {
                out.insert(node.index);
            }
        }
        out
    }

    /// Re-derives every node's mixing weight from per-frame positions
    /// `positions[0..=n]` (a non-uniform interpolation schedule).
    pub fn with_positions(mut self, positions: &[f64]) -> Result<Self> {
        check_positions(positions, self.num_frames)?;
        for node in &mut self.nodes {
            let (lo, hi) = (positions[node.parent_lo], positions[node.parent_hi]);
            node.weight = (positions[node.index] - lo) / (hi - lo);
        }
        Ok(self)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("invalid tree: {m}")));
        let mut by_index = BTreeMap::new();
        for node in &self.nodes {
            if node.index == 0 || node.index >= self.num_frames {
                return bad(format!("node index {} out of range", node.index));
            }
            if by_index.insert(node.index, node).is_some() {
                return bad(format!("duplicate node {}", node.index));
            }
            if !(node.parent_lo < node.index && node.index < node.parent_hi) {
                return bad(format!("node {} not between its parents", node.index));
            }
        }
        if by_index.len() != self.num_frames - 1 {
            return bad("missing interior frames".into());
        }
        for node in &self.nodes {
            for p in [node.parent_lo, node.parent_hi] {
                if p == 0 || p == self.num_frames {
                    continue;
                }
                match by_index.get(&p) {
                    Some(parent) if parent.level < node.level && parent.timestep > node.timestep => {}
                    _ => return bad(format!("parent {p} of node {} is not an earlier, noisier node", node.index)),
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_positions(positions: &[f64], n: usize) -> Result<()> {
    if positions.len() != n + 1 {
        return Err(Error::InvalidConfig(format!(
            "interpolation schedule has {} entries, expected {}",
            positions.len(),
            n + 1
        )));
    }
    if positions[0] != 0.0 || positions[n] != 1.0 {
        return Err(Error::InvalidConfig("interpolation schedule must start at 0 and end at 1".into()));
    }
    if positions.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::InvalidConfig("interpolation schedule must be strictly increasing".into()));
    }
    Ok(())
}
