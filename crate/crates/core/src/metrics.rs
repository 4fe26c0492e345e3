//! Fréchet distance between input and output image distributions and the
//! path length of interpolation sequences, over a pluggable feature space.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::Image;
use crate::error::{Error, Result};
use crate::tree::Scheme;

/// Eigenvalues below this are treated as zero when taking square roots.
const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: Vec<Vec<f64>>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        if let Some(first) = vectors.first() {
            let d = first.len();
            if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
                return Err(Error::ShapeMismatch {
                    expected: vec![d],
                    actual: vec![bad.len()],
                });
            }
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self {
            vectors,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Maps images into a fixed-dimension feature space.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;

    fn extract_all(&self, images: &[&Image]) -> Result<FeatureSet> {
        let vectors = images.iter().map(|im| self.extract(im)).collect::<Result<_>>()?;
        FeatureSet::new(vectors, self.id())
    }
}

/// A fixed Gaussian random projection of the image downsampled to a small
/// grid. Cheap, deterministic, and adequate for comparing schemes on toy data.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    grid: u32,
    projection: DMatrix<f64>,
    id: String,
}

impl RandomProjection {
    pub fn new(grid: u32, dim: usize, seed: u64) -> Self {
        let inputs = (3 * grid * grid) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = DMatrix::from_fn(dim, inputs, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        Self {
            grid,
            projection,
            id: format!("random_projection_g{grid}_d{dim}_s{seed}"),
        }
    }
}

impl Default for RandomProjection {
    fn default() -> Self {
        Self::new(8, 32, 0)
    }
}

impl FeatureExtractor for RandomProjection {
    fn id(&self) -> &str {
        &self.id
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let small = image.resized(self.grid, self.grid);
        let x = DVector::from_iterator(small.raw().len(), small.raw().iter().map(|&v| v as f64));
        Ok((&self.projection * x).iter().copied().collect())
    }
}

/// Sample mean and unbiased sample covariance.
pub fn gaussian_moments(f: &FeatureSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = f.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let d = f.dim();
    let mut mean = DVector::zeros(d);
    for v in &f.vectors {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in &f.vectors {
        let c = DVector::from_column_slice(v) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Symmetric positive semidefinite square root; negative eigenvalues from
/// round-off are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((Sa Sb)^{1/2})`, evaluated as `tr((A^{1/2} Sb A^{1/2})^{1/2})`,
/// which has the same eigenvalues but is symmetric.
pub fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> f64 {
    let ra = sqrtm_psd(sa);
    let inner = &ra * sb * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 })
        .sum()
}

pub fn fid_from_moments(
    (mu_a, sa): (&DVector<f64>, &DMatrix<f64>),
    (mu_b, sb): (&DVector<f64>, &DMatrix<f64>),
) -> Result<f64> {
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![mu_a.len()],
            actual: vec![mu_b.len()],
        });
    }
    let mean_term = (mu_a - mu_b).norm_squared();
    let trace = sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(sa, sb);
    Ok((mean_term + trace).max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.dim()],
            actual: vec![b.dim()],
        });
    }
    let (ma, ca) = gaussian_moments(a)?;
    let (mb, cb) = gaussian_moments(b)?;
    fid_from_moments((&ma, &ca), (&mb, &cb))
}

/// Sum of Euclidean distances between consecutive feature vectors.
pub fn ppl(seq: &FeatureSet) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: seq.len() });
    }
    Ok(seq
        .vectors
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum())
}

/// Two distinct interior frames from each sequence (endpoints are inputs).
pub fn sample_output_frames(sequences: &[Vec<Image>], seed: u64) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * sequences.len());
    for seq in sequences {
        let interior = seq.len().saturating_sub(2);
        if interior < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: interior });
        }
        for k in sample(&mut rng, interior, 2).into_iter() {
            out.push(seq[k + 1].clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub fid: f64,
    pub ppl_mean: f64,
    pub ppl_std: f64,
    pub input_samples: usize,
    pub output_samples: usize,
    pub sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor: String,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("features: {}\n", self.extractor);
        let _ = writeln!(s, "{:<22} {:>12} {:>22} {:>8}", "scheme", "FID", "PPL (mean ± std)", "n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>12.3} {:>12.3} ± {:<8.3} {:>8}",
                r.scheme.id(),
                r.fid,
                r.ppl_mean,
                r.ppl_std,
                r.output_samples
            );
        }
        s
    }
}

/// Evaluates every scheme's sequences against the shared pool of input
/// images. `sequences[scheme]` holds one ordered frame list per input pair.
pub fn evaluate(
    inputs: &[Image],
    sequences: &BTreeMap<Scheme, Vec<Vec<Image>>>,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<MetricReport> {
    let input_refs: Vec<&Image> = inputs.iter().collect();
    let input_features = extractor.extract_all(&input_refs)?;
    let mut rows = Vec::with_capacity(sequences.len());
    for (&scheme, seqs) in sequences {
        let outputs = sample_output_frames(seqs, seed)?;
        let out_refs: Vec<&Image> = outputs.iter().collect();
        let fid_value = fid(&input_features, &extractor.extract_all(&out_refs)?)?;
        let lengths = seqs
            .iter()
            .map(|seq| ppl(&extractor.extract_all(&seq.iter().collect::<Vec<_>>())?))
            .collect::<Result<Vec<f64>>>()?;
        let n = lengths.len() as f64;
        let mean = lengths.iter().sum::<f64>() / n;
        let std = if lengths.len() > 1 {
            (lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(ReportRow {
            scheme,
            fid: fid_value,
            ppl_mean: mean,
            ppl_std: std,
            input_samples: inputs.len(),
            output_samples: outputs.len(),
            sequences: seqs.len(),
        });
    }
    Ok(MetricReport {
        extractor: extractor.id().to_string(),
        rows,
    })
}
