//! Interpolation primitives over flattened arrays.

use crate::error::{Error, Result};

/// Below this angular separation (`|cos| > 1 - SLERP_LERP_THRESHOLD`) slerp
/// falls back to linear interpolation.
pub const SLERP_LERP_THRESHOLD: f64 = 1e-7;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    Ok(())
}

/// `(1 - u) * a + u * b`, evaluated as an offset from the nearer endpoint so
/// that `lerp(a, a, u) == a` and the endpoints are reproduced exactly.
pub fn lerp(a: &[f64], b: &[f64], u: f64) -> Result<Vec<f64>> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(&x, &y)| lerp_scalar(x, y, u)).collect())
}

pub(crate) fn lerp_scalar(x: f64, y: f64, u: f64) -> f64 {
    if u == 0.5 {
        // commutative, so swapping the endpoints cannot change the result
        0.5 * x + 0.5 * y
    } else if u > 0.5 {
        y + (1.0 - u) * (x - y)
    } else {
        x + u * (y - x)
    }
}

/// Spherical linear interpolation between `a` and `b` treated as flat vectors.
///
/// No renormalization is applied, so for raw latents the interpolant's norm
/// follows the usual `sin`-weighted combination of the two endpoint norms.
/// The result is exactly symmetric: `slerp(a, b, u) == slerp(b, a, 1 - u)`
/// whenever `1 - u` is representable without rounding.
pub fn slerp(a: &[f64], b: &[f64], u: f64) -> Result<Vec<f64>> {
    check_len(a, b)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!("interpolation weight {u} outside [0, 1]")));
    }
    // Canonicalize so that the weight on the first argument is always the
    // larger one; `1 - u` is exact for u in [0.5, 1].
    if u > 0.5 {
        return slerp_core(b, a, 1.0 - u);
    }
    slerp_core(a, b, u)
}

fn slerp_core(a: &[f64], b: &[f64], u: f64) -> Result<Vec<f64>> {
    if u == 0.0 {
        return Ok(a.to_vec());
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    if cos.abs() > 1.0 - SLERP_LERP_THRESHOLD {
        return Ok(a.iter().zip(b).map(|(&x, &y)| x + u * (y - x)).collect());
    }
    let theta = cos.acos();
    let sin_theta = theta.sin();
    let wa = ((1.0 - u) * theta).sin() / sin_theta;
    let wb = (u * theta).sin() / sin_theta;
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
