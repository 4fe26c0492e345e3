use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A noise array with the same `(channels, height, width)` layout as a latent.
pub type Noise = Array3<f64>;

/// A latent in the model's compressed space, tagged with the timestep of the
/// noise level it sits at. Timestep 0 is a clean latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub data: Array3<f64>,
    pub timestep: u32,
}

impl Latent {
    pub fn new(data: Array3<f64>, timestep: u32) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(Self { data, timestep })
    }

    pub fn clean(data: Array3<f64>) -> Result<Self> {
        Self::new(data, 0)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Contiguous view of the latent in row-major `(c, h, w)` order.
    pub fn as_slice(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("latent arrays are always in standard layout")
    }

    /// Rounds every entry through `f32`. Finalized frames are stored this way
    /// so that a frame reloaded from the on-disk cache is bit-identical to the
    /// in-memory one.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v as f32 as f64),
            timestep: self.timestep,
        }
    }

    pub fn l2_distance(&self, other: &Latent) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn check_shape(expected: (usize, usize, usize), actual: (usize, usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: vec![expected.0, expected.1, expected.2],
            actual: vec![actual.0, actual.1, actual.2],
        });
    }
    Ok(())
}

pub(crate) fn from_flat(shape: (usize, usize, usize), values: Vec<f64>) -> Result<Array3<f64>> {
    let len = values.len();
    Array3::from_shape_vec(shape, values).map_err(|_| Error::ShapeMismatch {
        expected: vec![shape.0, shape.1, shape.2],
        actual: vec![len],
    })
}
