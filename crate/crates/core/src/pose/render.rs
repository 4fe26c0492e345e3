//! Rasterization of skeletons into pose conditioning images, and the
//! matching marker detector used by the toy backend.

use super::skeleton::{Joint, Keypoint, PoseSkeleton, PoseSource};
use crate::backend::Image;
use crate::error::{Error, Result};

/// Limb graph of the 18-joint body model as `(from, to)` joint indices.
pub const LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

const JOINT_COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

/// Limbs are drawn darker than joints so the two never share a color.
const LIMB_SHADE: f32 = 0.6;

/// Chebyshev color tolerance for marker detection.
const MARKER_TOLERANCE: f32 = 0.05;

pub fn joint_color(joint: Joint) -> [f32; 3] {
    JOINT_COLORS[joint.index()].map(|c| c as f32 / 255.0)
}

pub fn marker_radius(width: u32, height: u32) -> u32 {
    (width.min(height) / 32).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPose {
    pub image: Image,
    pub joints_drawn: usize,
    pub limbs_drawn: usize,
}

fn to_pixel(k: &Keypoint, width: u32, height: u32) -> (i64, i64) {
    (
        (k.x * (width - 1) as f64).round() as i64,
        (k.y * (height - 1) as f64).round() as i64,
    )
}

/// Draws the skeleton on a black canvas: limbs as one-pixel lines, joints as
/// square markers. Joints missing from the skeleton are skipped along with
/// every limb touching them.
pub fn render_pose(skeleton: &PoseSkeleton, width: u32, height: u32) -> Result<RenderedPose> {
    if skeleton.is_empty() {
        return Err(Error::EmptySkeleton);
    }
    if width < 2 || height < 2 {
        return Err(Error::InvalidArgument(format!("render size {width}x{height} too small")));
    }
    let mut image = Image::new(width, height);
    let mut limbs_drawn = 0;
    for &(from, to) in &LIMBS {
        let (ja, jb) = (Joint::ALL[from], Joint::ALL[to]);
        let (Some(a), Some(b)) = (skeleton.keypoints.get(&ja), skeleton.keypoints.get(&jb)) else {
            continue;
        };
        let color = joint_color(ja).map(|c| c * LIMB_SHADE);
        draw_line(&mut image, to_pixel(a, width, height), to_pixel(b, width, height), color);
        limbs_drawn += 1;
    }
    let r = marker_radius(width, height) as i64;
    for (joint, kp) in &skeleton.keypoints {
        let (cx, cy) = to_pixel(kp, width, height);
        let color = joint_color(*joint);
        for y in (cy - r)..=(cy + r) {
            for x in (cx - r)..=(cx + r) {
                put_clipped(&mut image, x, y, color);
            }
        }
    }
    Ok(RenderedPose {
        image,
        joints_drawn: skeleton.keypoints.len(),
        limbs_drawn,
    })
}

fn put_clipped(image: &mut Image, x: i64, y: i64, color: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < image.width() && (y as u32) < image.height() {
        image.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(image: &mut Image, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [f32; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put_clipped(image, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Recovers joints from an image drawn in the marker format of
/// [`render_pose`]. Each joint's position is the centroid of pixels matching
/// its color; confidence is the matched fraction of a full marker.
pub fn detect_markers(image: &Image) -> Option<PoseSkeleton> {
    let (w, h) = image.size();
    if w < 2 || h < 2 {
        return None;
    }
    let r = marker_radius(w, h) as f64;
    let area = (2.0 * r + 1.0).powi(2);
    let mut sums = [(0.0f64, 0.0f64, 0usize); 18];
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(x, y);
            if px.iter().all(|&c| c < 0.5) {
                continue;
            }
            for joint in Joint::ALL {
                let color = joint_color(joint);
                let d = px
                    .iter()
                    .zip(color)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                if d < MARKER_TOLERANCE {
                    let s = &mut sums[joint.index()];
                    s.0 += x as f64;
                    s.1 += y as f64;
                    s.2 += 1;
                    break;
                }
            }
        }
    }
    let mut skeleton = PoseSkeleton::new(PoseSource::Detected);
    for joint in Joint::ALL {
        let (sx, sy, n) = sums[joint.index()];
        if n == 0 {
            continue;
        }
        let kp = Keypoint {
            x: (sx / n as f64 / (w - 1) as f64).clamp(0.0, 1.0),
            y: (sy / n as f64 / (h - 1) as f64).clamp(0.0, 1.0),
            confidence: (n as f64 / area).min(1.0),
        };
        skeleton.keypoints.insert(joint, kp);
    }
    (!skeleton.is_empty()).then_some(skeleton)
}

/// An upright figure with all 18 joints, markers spaced so they never
/// overlap at 64 px and above.
pub fn standing_figure() -> PoseSkeleton {
    let coords = [
        (0.50, 0.12),
        (0.50, 0.25),
        (0.35, 0.25),
        (0.25, 0.40),
        (0.20, 0.55),
        (0.65, 0.25),
        (0.75, 0.40),
        (0.80, 0.55),
        (0.42, 0.55),
        (0.40, 0.72),
        (0.40, 0.90),
        (0.58, 0.55),
        (0.60, 0.72),
        (0.60, 0.90),
        (0.40, 0.05),
        (0.60, 0.05),
        (0.30, 0.12),
        (0.70, 0.12),
    ];
    Joint::ALL
        .into_iter()
        .zip(coords)
        .fold(PoseSkeleton::new(PoseSource::Detected), |s, (j, (x, y))| {
            s.with(j, x, y, 1.0).unwrap()
        })
}
