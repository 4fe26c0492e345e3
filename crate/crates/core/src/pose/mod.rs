//! Subject poses: the 18-joint skeleton, keypoint interpolation, rendering
//! to conditioning images, and extraction with a style-translation fallback.

mod fallback;
mod render;
mod skeleton;

pub use fallback::{extract_pose_with_fallback, translate_image, FallbackConfig, DEFAULT_CONF_FLOOR};
pub use render::{detect_markers, joint_color, marker_radius, render_pose, standing_figure, RenderedPose, LIMBS};
pub use skeleton::{interpolate_pose, shared_keypoints, Joint, Keypoint, PoseSkeleton, PoseSource};
