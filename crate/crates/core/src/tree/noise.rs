//! Counter-based keyed noise: every draw is addressed by
//! `(global_seed, stream)`, so any node or candidate can be regenerated in
//! isolation without replaying earlier draws.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::build::FrameNode;
use crate::diffusion::Noise;

/// Streams with the top bit set are reserved for baseline trajectories.
pub(crate) const BASELINE_NAMESPACE: u64 = 1 << 63;

/// Standard normal noise of the given shape drawn from stream `stream` of
/// the generator keyed by `seed`.
pub fn keyed_noise(seed: u64, stream: u64, shape: (usize, usize, usize)) -> Noise {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Stream id of `(level, index, candidate)`.
pub fn node_stream(node: &FrameNode, candidate: usize) -> u64 {
    debug_assert!(candidate < 1 << 16);
    node.noise_key | candidate as u64
}

/// The shared noise applied to both parents of `node` for `candidate`.
pub fn node_noise(global_seed: u64, node: &FrameNode, candidate: usize, shape: (usize, usize, usize)) -> Noise {
    keyed_noise(global_seed, node_stream(node, candidate), shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(index: usize, level: usize) -> FrameNode {
        FrameNode::new(index, 0, 2 * index, 100, level, 0.5)
    }

    #[test]
    fn deterministic() {
        let n = node(4, 0);
        assert_eq!(node_noise(7, &n, 0, (2, 8, 8)), node_noise(7, &n, 0, (2, 8, 8)));
    }

    #[test]
    fn distinct_nodes_and_candidates_decorrelate() {
        let shape = (1, 100, 100);
        let a = node_noise(7, &node(4, 0), 0, shape);
        for b in [node_noise(7, &node(2, 1), 0, shape), node_noise(7, &node(4, 0), 1, shape), node_noise(8, &node(4, 0), 0, shape)] {
            assert_ne!(a, b);
            let n = a.len() as f64;
            let corr = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / n;
            assert!(corr.abs() < 0.05, "corr {corr}");
        }
    }

    #[test]
    fn moments() {
        let x = keyed_noise(11, 5, (1, 1, 100_000));
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // standard errors: 1/sqrt(n) for the mean, sqrt(2/(n-1)) for the variance
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1.0)).sqrt(), "var {var}");
    }
}
