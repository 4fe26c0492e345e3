use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use super::Session;
use crate::backend::{Backend, Image};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, FeatureExtractor, MetricReport};
use crate::tree::{run_scheme, GenerationConfig, Scheme};

/// Scores `schemes` over completed projects. A project's own scheme is
/// read from its frames; other schemes are rerun on its inputs with the
/// same configuration and conditioning. Incomplete projects are an error
/// naming each of them.
pub fn evaluate_projects(
    dirs: &[PathBuf],
    schemes: &[Scheme],
    backend: Arc<dyn Backend>,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<MetricReport> {
    if dirs.is_empty() || schemes.is_empty() {
        return Err(Error::InvalidArgument("need at least one project and one scheme".into()));
    }
    let sessions = dirs
        .iter()
        .map(|d| Session::open(d, backend.clone()))
        .collect::<Result<Vec<_>>>()?;
    let incomplete: Vec<String> = sessions
        .iter()
        .filter(|s| !s.is_complete() || s.project().embeddings.is_none())
        .map(|s| s.dir().display().to_string())
        .collect();
    if !incomplete.is_empty() {
        return Err(Error::InvalidConfig(format!("incomplete projects: {}", incomplete.join(", "))));
    }
    let mut inputs = Vec::with_capacity(2 * sessions.len());
    let mut sequences: BTreeMap<Scheme, Vec<Vec<Image>>> = BTreeMap::new();
    for s in &sessions {
        let [a, b] = s.input_images()?;
        for &scheme in schemes {
            let frames = if scheme == s.project().config.scheme {
                s.frames()?
            } else {
                let cfg = GenerationConfig { scheme, ..s.project().config.clone() };
                let seq = run_scheme(&a, &b, &cfg, backend.as_ref(), &s.conditioning()?)?;
                seq.frames.into_iter().map(|f| f.image).collect()
            };
            sequences.entry(scheme).or_default().push(frames);
        }
        inputs.push(a);
        inputs.push(b);
    }
    evaluate(&inputs, &sequences, extractor, seed)
}
