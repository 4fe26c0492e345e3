//! Affine resampling of latents on their spatial grid.

use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::latent::Latent;
use crate::error::{Error, Result};

/// A 2x3 affine map `p -> L p + b` on `(x, y)` latent pixel coordinates
/// (x is the column, y the row). It maps source positions to destination
/// positions: translating by `(1, 0)` moves content one column right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
}

const EPS: f64 = 1e-12;

impl AffineTransform {
    pub fn new(matrix: [[f64; 3]; 2]) -> Result<Self> {
        let xf = Self { matrix };
        let det = xf.det();
        if det.abs() < EPS || !det.is_finite() {
            return Err(Error::SingularTransform(det));
        }
        Ok(xf)
    }

    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Uniform scaling by `factor` about the point `(cx, cy)`.
    pub fn zoom(factor: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new([
            [factor, 0.0, (1.0 - factor) * cx],
            [0.0, factor, (1.0 - factor) * cy],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() < EPS {
            return Err(Error::SingularTransform(det));
        }
        let [[a, b, c], [d, e, f]] = self.matrix;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Self {
            matrix: [
                [ia, ib, -(ia * c + ib * f)],
                [id, ie, -(id * c + ie * f)],
            ],
        })
    }

    /// The transform raised to a real power `u`, i.e. the map that applied
    /// `1/u` times gives `self`. Defined for rotation-scalings and for linear
    /// parts with positive real eigenvalues.
    pub fn powf(&self, u: f64) -> Result<Self> {
        let [[a, b, tx], [d, e, ty]] = self.matrix;
        if self.det().abs() < EPS {
            return Err(Error::SingularTransform(self.det()));
        }
        // rotation-scaling: treat the linear part as the complex number a + i d
        if a == e && b == -d {
            let (s, phi) = (a.hypot(d), d.atan2(a));
            let (pr, pi) = (s.powf(u) * (u * phi).cos(), s.powf(u) * (u * phi).sin());
            // translation factor (z^u - 1) / (z - 1), or u when z = 1
            let (nr, ni) = (pr - 1.0, pi);
            let (dr, di) = (a - 1.0, d);
            let (fr, fi) = if dr.hypot(di) < EPS {
                (u, 0.0)
            } else {
                let den = dr * dr + di * di;
                ((nr * dr + ni * di) / den, (ni * dr - nr * di) / den)
            };
            return Ok(Self {
                matrix: [
                    [pr, -pi, fr * tx - fi * ty],
                    [pi, pr, fi * tx + fr * ty],
                ],
            });
        }
        let tr = a + e;
        let det = self.det();
        let disc = tr * tr / 4.0 - det;
        if disc < 0.0 {
            return Err(Error::InvalidArgument(
                "affine power undefined for this linear part".into(),
            ));
        }
        let root = disc.sqrt();
        let (l1, l2) = (tr / 2.0 + root, tr / 2.0 - root);
        if l1 <= 0.0 || l2 <= 0.0 {
            return Err(Error::InvalidArgument(
                "affine power needs positive eigenvalues".into(),
            ));
        }
        let factor = |l: f64| if (l - 1.0).abs() < EPS { u } else { (l.powf(u) - 1.0) / (l - 1.0) };
        // eigenvectors as columns of V
        let (v1, v2) = if b.abs() > EPS {
            ([b, l1 - a], [b, l2 - a])
        } else if d.abs() > EPS {
            ([l1 - e, d], [l2 - e, d])
        } else {
            // diagonal: order eigenvalues to match the axes
            if (l1 - a).abs() < (l1 - e).abs() {
                ([1.0, 0.0], [0.0, 1.0])
            } else {
                ([0.0, 1.0], [1.0, 0.0])
            }
        };
        let vdet = v1[0] * v2[1] - v2[0] * v1[1];
        if vdet.abs() < EPS {
            return Err(Error::InvalidArgument("affine linear part is not diagonalizable".into()));
        }
        // V diag(w1, w2) V^-1
        let conj = |w1: f64, w2: f64| -> [[f64; 2]; 2] {
            let inv = [[v2[1] / vdet, -v2[0] / vdet], [-v1[1] / vdet, v1[0] / vdet]];
            let vd = [[v1[0] * w1, v2[0] * w2], [v1[1] * w1, v2[1] * w2]];
            [
                [
                    vd[0][0] * inv[0][0] + vd[0][1] * inv[1][0],
                    vd[0][0] * inv[0][1] + vd[0][1] * inv[1][1],
                ],
                [
                    vd[1][0] * inv[0][0] + vd[1][1] * inv[1][0],
                    vd[1][0] * inv[0][1] + vd[1][1] * inv[1][1],
                ],
            ]
        };
        let lp = conj(l1.powf(u), l2.powf(u));
        let f = conj(factor(l1), factor(l2));
        Ok(Self {
            matrix: [
                [lp[0][0], lp[0][1], f[0][0] * tx + f[0][1] * ty],
                [lp[1][0], lp[1][1], f[1][0] * tx + f[1][1] * ty],
            ],
        })
    }
}

/// Motion specification as given on the command line: `zoom:<factor>` about
/// the latent center or `translate:<dx>,<dy>` in latent pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Zoom { factor: f64 },
    Translate { dx: f64, dy: f64 },
}

impl Motion {
    pub fn transform(&self, height: usize, width: usize) -> Result<AffineTransform> {
        match *self {
            Motion::Zoom { factor } => AffineTransform::zoom(
                factor,
                (width as f64 - 1.0) / 2.0,
                (height as f64 - 1.0) / 2.0,
            ),
            Motion::Translate { dx, dy } => Ok(AffineTransform::translation(dx, dy)),
        }
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad motion {s:?}; expected zoom:<f> or translate:<dx>,<dy>"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "zoom" => {
                let factor: f64 = arg.trim().parse().map_err(|_| bad())?;
                if factor.is_nan() || factor <= 0.0 {
                    return Err(bad());
                }
                Ok(Motion::Zoom { factor })
            }
            "translate" => {
                let (dx, dy) = arg.split_once(',').ok_or_else(bad)?;
                Ok(Motion::Translate {
                    dx: dx.trim().parse().map_err(|_| bad())?,
                    dy: dy.trim().parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Bilinear resampling of `z` under `xf`, with out-of-frame samples taken
/// from the reflection of the latent about its border.
pub fn warp_latent(z: &Latent, xf: &AffineTransform) -> Result<Latent> {
    let inv = xf.inverse()?;
    if xf.is_identity() {
        return Ok(z.clone());
    }
    let (c, h, w) = z.shape();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let (xa, xb) = (reflect(x0, w), reflect(x0 + 1, w));
            let (ya, yb) = (reflect(y0, h), reflect(y0 + 1, h));
            for ch in 0..c {
                let top = z.data[[ch, ya, xa]] * (1.0 - fx) + z.data[[ch, ya, xb]] * fx;
                let bot = z.data[[ch, yb, xa]] * (1.0 - fx) + z.data[[ch, yb, xb]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Latent::new(out, z.timestep)
}
