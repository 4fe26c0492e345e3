use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Cursor, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    candidate_latent_path, candidate_path, digest, frame_path, node_pose_path, read_latent, write_atomic,
    write_latent, InputPoses, PairEmbeddings, Project, Prompts, INPUT_FILES, REPORT_FILE,
};
use crate::backend::{Backend, Image};
use crate::diffusion::Latent;
use crate::error::{Error, Result};
use crate::inversion::{invert_prompt, invert_shared, InversionConfig};
use crate::pose::{extract_pose_with_fallback, FallbackConfig, PoseSkeleton, PoseSource};
use crate::ranking::apply_user_selection;
use crate::tree::{
    generate_frame, run_baseline_latents, ConditioningProvider, FrameNode, FrameStore, GenerationConfig,
    PairConditioning, Scheme,
};

/// Which nodes a generation pass may (re)compute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeFilter {
    All,
    Level(usize),
    Nodes(BTreeSet<usize>),
}

impl NodeFilter {
    fn accepts(&self, node: &FrameNode) -> bool {
        match self {
            NodeFilter::All => true,
            NodeFilter::Level(l) => node.level == *l,
            NodeFilter::Nodes(set) => set.contains(&node.index),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateSummary {
    /// Nodes computed in this pass.
    pub generated: Vec<usize>,
    /// Nodes whose cached candidates were still valid.
    pub reused: Vec<usize>,
    /// Whether every frame is now available.
    pub complete: bool,
}

/// A project directory bound to a backend.
pub struct Session {
    dir: PathBuf,
    project: Project,
    backend: Arc<dyn Backend>,
}

fn prepare_input(image: &Image, backend: &dyn Backend) -> Image {
    let (w, h) = backend.caps().image_size;
    // stored as 8-bit PNG, so round now to keep reloads identical
    Image::from_rgb8(&image.resized(w, h).to_rgb8())
}

impl Session {
    /// Starts a new project in `dir` from two input images.
    #[allow(clippy::too_many_arguments)]
    pub fn create(
        dir: &Path,
        id: &str,
        image_a: &Image,
        image_b: &Image,
        prompts: Prompts,
        config: GenerationConfig,
        inversion: Option<InversionConfig>,
        backend: Arc<dyn Backend>,
    ) -> Result<Self> {
        config.validate()?;
        if dir.join(super::PROJECT_FILE).exists() {
            return Err(Error::InvalidConfig(format!("{} already holds a project", dir.display())));
        }
        let mut digests = [String::new(), String::new()];
        for (k, image) in [image_a, image_b].into_iter().enumerate() {
            let png = prepare_input(image, backend.as_ref()).encode_png()?;
            digests[k] = digest(&[&png]);
            write_atomic(&dir.join(INPUT_FILES[k]), &png)?;
        }
        let project = Project {
            id: id.to_string(),
            version: 0,
            backend: backend.name().to_string(),
            inputs: INPUT_FILES.map(String::from),
            input_digests: digests,
            prompts,
            tree: Some(config.tree()?),
            config,
            inversion,
            embeddings: None,
            poses: InputPoses::default(),
            candidates: BTreeMap::new(),
            selections: BTreeMap::new(),
            prompt_overrides: BTreeMap::new(),
            pose_overrides: BTreeMap::new(),
            finalized: BTreeMap::new(),
            baseline_key: None,
        };
        project.save(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            project,
            backend,
        })
    }

    pub fn open(dir: &Path, backend: Arc<dyn Backend>) -> Result<Self> {
        let project = Project::load(dir)?;
        if project.backend != backend.name() {
            tracing::warn!(
                "project was created with backend {:?}, opened with {:?}",
                project.backend,
                backend.name()
            );
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            project,
            backend,
        })
    }

    pub fn project(&self) -> &Project {
        &self.project
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save(&self) -> Result<()> {
        self.project.save(&self.dir)
    }

    fn bump(&mut self) -> Result<()> {
        self.project.version += 1;
        self.save()
    }

    pub fn input_images(&self) -> Result<[Image; 2]> {
        Ok([Image::load(&self.path(&self.project.inputs[0]))?, Image::load(&self.path(&self.project.inputs[1]))?])
    }

    fn input_latents(&self) -> Result<(Latent, Latent)> {
        let [a, b] = self.input_images()?;
        Ok((self.backend.encode_image(&a)?, self.backend.encode_image(&b)?))
    }

    fn uses_pose(&self) -> bool {
        self.project.config.use_pose && self.backend.caps().supports_pose
    }

    /// Computes the pair's embeddings (with textual inversion when
    /// configured). No-op once done.
    pub fn prepare_embeddings(&mut self) -> Result<()> {
        if self.project.embeddings.is_some() {
            return Ok(());
        }
        let b = self.backend.as_ref();
        let pos = b.encode_text(&self.project.prompts.positive)?;
        let neg = b.encode_text(&self.project.prompts.negative)?;
        let embeddings = match &self.project.inversion {
            None => PairEmbeddings {
                positive_a: pos.clone(),
                positive_b: pos,
                negative: neg,
            },
            Some(cfg) => {
                let schedule = self.project.config.schedule()?;
                let mut cfg = cfg.clone();
                if cfg.timestep_range.is_none() {
                    cfg.timestep_range = Some(self.project.config.t_window());
                }
                let (za, zb) = self.input_latents()?;
                let seeded = |k: u64| InversionConfig { seed: cfg.seed.wrapping_add(k), ..cfg.clone() };
                PairEmbeddings {
                    positive_a: invert_prompt(&pos, &za, &seeded(0), b, &schedule)?.embedding,
                    positive_b: invert_prompt(&pos, &zb, &seeded(1), b, &schedule)?.embedding,
                    negative: invert_shared(&neg, &[&za, &zb], &seeded(2), b, &schedule)?.embedding,
                }
            }
        };
        self.project.embeddings = Some(embeddings);
        self.bump()
    }

    /// Extracts the inputs' poses (with the photographic fallback). No-op
    /// once done or when pose conditioning is off.
    pub fn prepare_poses(&mut self) -> Result<()> {
        if self.project.poses.extracted || !self.uses_pose() {
            return Ok(());
        }
        let schedule = self.project.config.schedule()?;
        let cfg = FallbackConfig {
            conf_floor: self.project.config.pose_conf_floor,
            seed: self.project.config.global_seed,
            ..FallbackConfig::default()
        };
        let [a, b] = self.input_images()?;
        let mut found = [None, None];
        for (k, image) in [&a, &b].into_iter().enumerate() {
            found[k] = extract_pose_with_fallback(image, self.backend.as_ref(), &schedule, &cfg)?;
            if let Some(s) = &found[k] {
                let name = ["poses/input_a.json", "poses/input_b.json"][k];
                write_atomic(&self.path(name), s.to_json().as_bytes())?;
            }
        }
        let [pa, pb] = found;
        self.project.poses = InputPoses {
            extracted: true,
            a: pa,
            b: pb,
        };
        self.bump()
    }

    pub fn prepare(&mut self) -> Result<()> {
        self.prepare_embeddings()?;
        self.prepare_poses()
    }

    pub fn conditioning(&self) -> Result<PairConditioning> {
        let e = self
            .project
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("embeddings not prepared".into()))?;
        let cfg = &self.project.config;
        let pose = self.uses_pose();
        let prompt_overrides = self
            .project
            .prompt_overrides
            .iter()
            .map(|(&i, p)| Ok((i, self.backend.encode_text(p)?)))
            .collect::<Result<_>>()?;
        Ok(PairConditioning {
            positive_a: e.positive_a.clone(),
            positive_b: e.positive_b.clone(),
            negative: e.negative.clone(),
            guidance_scale: cfg.guidance_scale,
            pose_a: self.project.poses.a.clone().filter(|_| pose),
            pose_b: self.project.poses.b.clone().filter(|_| pose),
            pose_conf_floor: cfg.pose_conf_floor,
            pose_resolution: pose.then(|| self.backend.caps().pose_resolution),
            prompt_overrides,
            pose_overrides: if pose { self.project.pose_overrides.clone() } else { BTreeMap::new() },
        })
    }

    fn context_key(&self) -> Result<String> {
        context_key(&self.project)
    }

    fn node_key(&self, ctx: &str, node: &FrameNode, parent_keys: (&str, &str)) -> Result<String> {
        node_key(&self.project, ctx, node, parent_keys)
    }

    fn cached_latents_exist(&self, node: usize) -> bool {
        cached_latents_exist(&self.project, &self.dir, node)
    }

    /// Nodes the next generation pass would regenerate.
    pub fn stale_nodes(&self) -> Result<BTreeSet<usize>> {
        stale_nodes(&self.project, &self.dir)
    }

    /// Generates every stale node accepted by `filter`, reusing nodes whose
    /// cache key is unchanged, then rewrites the frame files and the report.
    /// State is saved after each node so an interrupted pass resumes where
    /// it stopped.
    pub fn generate(&mut self, filter: &NodeFilter, progress: &mut dyn FnMut(f64)) -> Result<GenerateSummary> {
        self.prepare()?;
        if self.project.config.scheme != Scheme::Ours {
            return self.generate_baseline(progress);
        }
        let tree = self.project.tree.clone().ok_or_else(|| Error::InvalidConfig("project has no tree".into()))?;
        let config = self.project.config.clone();
        let schedule = config.schedule()?;
        let cond = self.conditioning()?;
        let positions = config.positions();
        let ctx = self.context_key()?;
        let n = tree.num_frames;
        let (za, zb) = self.input_latents()?;
        let mut store = FrameStore::from([(0, za), (n, zb)]);
        let mut out_keys = endpoint_keys(&self.project, n);
        let requested = tree.nodes.iter().filter(|nd| filter.accepts(nd)).count().max(1);
        let mut done = 0usize;
        let mut summary = GenerateSummary::default();
        progress(0.0);
        for node in &tree.nodes {
            let i = node.index;
            let (Some(klo), Some(khi)) = (out_keys.get(&node.parent_lo), out_keys.get(&node.parent_hi)) else {
                if filter.accepts(node) {
                    let missing = if out_keys.contains_key(&node.parent_lo) { node.parent_hi } else { node.parent_lo };
                    return Err(Error::MissingParent(missing));
                }
                continue;
            };
            let key = self.node_key(&ctx, node, (klo, khi))?;
            let fresh = self.project.finalized.get(&i) == Some(&key) && self.cached_latents_exist(i);
            if !fresh {
                if !filter.accepts(node) {
                    continue;
                }
                let bundle = cond.conditioning(i, positions[i])?;
                let output = generate_frame(node, &store, self.backend.as_ref(), &schedule, &bundle, &config)?;
                let mut set = output.candidates.clone();
                for (k, cand) in set.candidates.iter_mut().enumerate() {
                    let rel = candidate_path(i, cand.id);
                    write_atomic(&self.path(&rel), &output.images[k].encode_png()?)?;
                    write_latent(&self.path(&candidate_latent_path(i, cand.id)), &output.latents[k])?;
                    cand.image = Some(rel);
                }
                if let Some(pose) = cond.pose(i, positions[i]) {
                    write_atomic(&self.path(&node_pose_path(i)), pose.to_json().as_bytes())?;
                }
                self.project.selections.remove(&i);
                self.project.candidates.insert(i, set);
                self.project.finalized.insert(i, key.clone());
                self.bump()?;
                summary.generated.push(i);
                done += 1;
                progress(done as f64 / requested as f64);
            } else {
                if filter.accepts(node) {
                    done += 1;
                }
                summary.reused.push(i);
            }
            let selected = self.project.selected(i).unwrap_or(0);
            store.insert(i, read_latent(&self.path(&candidate_latent_path(i, selected)))?);
            out_keys.insert(i, output_key(&key, selected));
        }
        let available: BTreeSet<usize> = store.keys().copied().collect();
        self.write_frames(&store)?;
        summary.complete = available.len() == n + 1;
        self.write_report(&available)?;
        progress(1.0);
        Ok(summary)
    }

    fn generate_baseline(&mut self, progress: &mut dyn FnMut(f64)) -> Result<GenerateSummary> {
        let config = self.project.config.clone();
        let n = config.num_frames;
        let key = self.context_key()?;
        let all_frames = (0..=n).all(|i| self.path(&frame_path(i)).is_file());
        if self.project.baseline_key.as_deref() == Some(key.as_str()) && all_frames {
            return Ok(GenerateSummary {
                reused: (1..n).collect(),
                complete: true,
                ..Default::default()
            });
        }
        progress(0.0);
        let schedule = config.schedule()?;
        let (za, zb) = self.input_latents()?;
        let cond = self.conditioning()?;
        let seq = run_baseline_latents(config.scheme, &za, &zb, &config, &schedule, self.backend.as_ref(), &cond)?;
        for f in &seq.frames {
            write_atomic(&self.path(&frame_path(f.index)), &f.image.encode_png()?)?;
        }
        self.project.baseline_key = Some(key);
        self.bump()?;
        self.write_report(&(0..=n).collect())?;
        progress(1.0);
        Ok(GenerateSummary {
            generated: (1..n).collect(),
            reused: Vec::new(),
            complete: true,
        })
    }

    /// Writes decoded frames for every available index and removes frame
    /// files of indices that are not (stale after an invalidation).
    fn write_frames(&self, store: &FrameStore) -> Result<()> {
        for i in 0..=self.project.config.num_frames {
            let path = self.path(&frame_path(i));
            match store.get(&i) {
                Some(z) => {
                    let png = self.backend.decode_latent(z)?.encode_png()?;
                    if fs::read(&path).ok().as_deref() != Some(png.as_slice()) {
                        write_atomic(&path, &png)?;
                    }
                }
                None => {
                    if path.exists() {
                        fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn write_report(&self, available: &BTreeSet<usize>) -> Result<()> {
        let p = &self.project;
        let nodes: Vec<_> = p
            .tree
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter(|nd| p.config.scheme == Scheme::Ours && available.contains(&nd.index))
            .map(|nd| {
                let set = p.candidates.get(&nd.index);
                json!({
                    "index": nd.index,
                    "level": nd.level,
                    "timestep": nd.timestep,
                    "weight": nd.weight,
                    "parents": [nd.parent_lo, nd.parent_hi],
                    "selected": p.selected(nd.index),
                    "selection_source": set.and_then(|s| s.selection_source),
                    "candidates": set.map(|s| s.candidates.clone()),
                    "key": p.finalized.get(&nd.index),
                })
            })
            .collect();
        let pose_source = |s: &Option<PoseSkeleton>| s.as_ref().map(|s| s.source);
        let report = json!({
            "id": p.id,
            "scheme": p.config.scheme,
            "num_frames": p.config.num_frames,
            "complete": available.len() == p.config.num_frames + 1,
            "frames": available.iter().map(|&i| frame_path(i)).collect::<Vec<_>>(),
            "timesteps": p.tree.as_ref().map(|t| t.timesteps.clone()),
            "poses": { "a": pose_source(&p.poses.a), "b": pose_source(&p.poses.b) },
            "nodes": nodes,
        });
        write_atomic(&self.path(REPORT_FILE), serde_json::to_string_pretty(&report)?.as_bytes())
    }

    fn tree_node(&self, node: usize) -> Result<&FrameNode> {
        self.project
            .tree
            .as_ref()
            .and_then(|t| t.node(node))
            .ok_or(Error::UnknownNode(node))
    }

    fn subtree(&self, node: usize) -> Result<BTreeSet<usize>> {
        self.tree_node(node)?;
        let tree = self.project.tree.as_ref().expect("checked above");
        let mut set = tree.descendants(node);
        set.insert(node);
        Ok(set)
    }

    /// Records a user's candidate choice; returns the nodes to regenerate.
    pub fn select(&mut self, node: usize, candidate: usize) -> Result<BTreeSet<usize>> {
        self.tree_node(node)?;
        let set = self.project.candidates.get(&node).ok_or(Error::UnknownNode(node))?;
        let tree = self.project.tree.as_ref().expect("node lookup succeeded");
        let (updated, invalidated) = apply_user_selection(set, candidate, tree)?;
        self.project.candidates.insert(node, updated);
        self.project.selections.insert(node, candidate);
        self.bump()?;
        Ok(invalidated)
    }

    /// Sets (or clears with `None`) the prompt used for one node; returns
    /// the node and its descendants, all of which must be regenerated.
    pub fn set_prompt_override(&mut self, node: usize, prompt: Option<String>) -> Result<BTreeSet<usize>> {
        let affected = self.subtree(node)?;
        match prompt {
            Some(p) => self.project.prompt_overrides.insert(node, p),
            None => self.project.prompt_overrides.remove(&node),
        };
        self.bump()?;
        Ok(affected)
    }

    pub fn set_pose_override(&mut self, node: usize, pose: Option<PoseSkeleton>) -> Result<BTreeSet<usize>> {
        let affected = self.subtree(node)?;
        match pose {
            Some(mut s) => {
                s.validate()?;
                s.source = PoseSource::UserOverride;
                self.project.pose_overrides.insert(node, s)
            }
            None => self.project.pose_overrides.remove(&node),
        };
        self.bump()?;
        Ok(affected)
    }

    /// PNG bytes of frame `index`, if generated.
    pub fn frame_png(&self, index: usize) -> Result<Vec<u8>> {
        let path = self.path(&frame_path(index));
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn candidate_png(&self, node: usize, candidate: usize) -> Result<Vec<u8>> {
        let set = self.project.candidates.get(&node).ok_or(Error::UnknownNode(node))?;
        set.get(candidate).ok_or(Error::UnknownCandidate(candidate))?;
        let path = self.path(&candidate_path(node, candidate));
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    /// All frames in order; fails if any is missing.
    pub fn frames(&self) -> Result<Vec<Image>> {
        (0..=self.project.config.num_frames)
            .map(|i| Image::load(&self.path(&frame_path(i))))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        (0..=self.project.config.num_frames).all(|i| self.path(&frame_path(i)).is_file())
    }

    /// Zip archive of the frames in order.
    pub fn export_zip(&self) -> Result<Vec<u8>> {
        export_frames_zip(&self.dir, self.project.config.num_frames)
    }

    /// Replaces the configuration of an existing project. Prepared inputs
    /// the change affects are dropped; node caches are keyed on the config
    /// and go stale on their own.
    pub fn reconfigure(&mut self, config: GenerationConfig) -> Result<()> {
        config.validate()?;
        let old = &self.project.config;
        if *old == config {
            return Ok(());
        }
        let schedule_changed = old.num_steps != config.num_steps || old.profile != config.profile;
        if self.project.inversion.is_some() && (schedule_changed || old.t_window() != config.t_window()) {
            self.project.embeddings = None;
        }
        if schedule_changed
            || old.use_pose != config.use_pose
            || old.pose_conf_floor != config.pose_conf_floor
            || old.global_seed != config.global_seed
        {
            self.project.poses = InputPoses::default();
        }
        let tree = config.tree()?;
        let keep = |i: &usize| tree.node(*i).is_some();
        self.project.candidates.retain(|i, _| keep(i));
        self.project.selections.retain(|i, _| keep(i));
        self.project.finalized.retain(|i, _| keep(i));
        self.project.prompt_overrides.retain(|i, _| keep(i));
        self.project.pose_overrides.retain(|i, _| keep(i));
        self.project.tree = Some(tree);
        self.project.config = config;
        self.project.baseline_key = None;
        self.bump()
    }
}

/// Zip archive of the `num_frames + 1` frames stored under `dir`, in order.
/// Key material shared by every node: configuration, backend,
/// embeddings and input poses.
fn context_key(p: &Project) -> Result<String> {
    Ok(digest(&[
        p.config.digest().as_bytes(),
        p.backend.as_bytes(),
        &serde_json::to_vec(&p.embeddings)?,
        &serde_json::to_vec(&p.poses)?,
    ]))
}

fn node_key(p: &Project, ctx: &str, node: &FrameNode, parent_keys: (&str, &str)) -> Result<String> {
    Ok(digest(&[
        ctx.as_bytes(),
        &serde_json::to_vec(node)?,
        parent_keys.0.as_bytes(),
        parent_keys.1.as_bytes(),
        &serde_json::to_vec(&p.prompt_overrides.get(&node.index))?,
        &serde_json::to_vec(&p.pose_overrides.get(&node.index))?,
    ]))
}

/// What children see of a node: its key plus the chosen candidate.
fn output_key(node_key: &str, selected: usize) -> String {
    digest(&[node_key.as_bytes(), &selected.to_le_bytes()])
}

fn endpoint_keys(p: &Project, n: usize) -> BTreeMap<usize, String> {
    BTreeMap::from([
        (0, digest(&[b"input", p.input_digests[0].as_bytes()])),
        (n, digest(&[b"input", p.input_digests[1].as_bytes()])),
    ])
}

fn cached_latents_exist(p: &Project, dir: &Path, node: usize) -> bool {
    p.candidates.get(&node).is_some_and(|set| {
        set.candidates
            .iter()
            .all(|c| dir.join(candidate_latent_path(node, c.id)).is_file())
    })
}

/// Nodes of a project stored in `dir` whose cached candidates no longer
/// match their inputs, computed without touching the backend.
pub fn stale_nodes(p: &Project, dir: &Path) -> Result<BTreeSet<usize>> {
    let Some(tree) = &p.tree else {
        return Ok(BTreeSet::new());
    };
    if p.config.scheme != Scheme::Ours {
        let fresh = p.baseline_key.as_deref() == Some(context_key(p)?.as_str())
            && (0..=tree.num_frames).all(|i| dir.join(frame_path(i)).is_file());
        return Ok(if fresh { BTreeSet::new() } else { tree.nodes.iter().map(|nd| nd.index).collect() });
    }
    let ctx = context_key(p)?;
    let mut out_keys = endpoint_keys(p, tree.num_frames);
    let mut stale = BTreeSet::new();
    for node in &tree.nodes {
        let (Some(klo), Some(khi)) = (out_keys.get(&node.parent_lo), out_keys.get(&node.parent_hi)) else {
            stale.insert(node.index);
            continue;
        };
        let key = node_key(p, &ctx, node, (klo, khi))?;
        if p.embeddings.is_none() || p.finalized.get(&node.index) != Some(&key) || !cached_latents_exist(p, dir, node.index) {
            stale.insert(node.index);
        }
        out_keys.insert(node.index, output_key(&key, p.selected(node.index).unwrap_or(0)));
    }
    Ok(stale)
}

pub fn export_frames_zip(dir: &Path, num_frames: usize) -> Result<Vec<u8>> {
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default();
    for i in 0..=num_frames {
        let rel = frame_path(i);
        let path = dir.join(&rel);
        let png = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let name = rel.trim_start_matches("frames/");
        zip.start_file(name, opts).map_err(zip_err)?;
        zip.write_all(&png).map_err(|e| Error::io(&path, e))?;
    }
    Ok(zip.finish().map_err(zip_err)?.into_inner())
}

fn zip_err(e: zip::result::ZipError) -> Error {
    Error::io(Path::new("export.zip"), std::io::Error::other(e))
}
