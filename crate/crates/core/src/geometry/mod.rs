//! Ground truth, warping, robust estimation and AUC metrics. Always `f64`.

mod estimate;
mod homography;
mod matchset;
mod metrics;
mod pose;
pub mod synth;

pub use estimate::{
    decompose_essential, dlt_homography, eight_point, estimate_homography_ransac, estimate_pose_ransac,
};
pub use homography::{corner_error, grid_coverage, sample_homography, warp_points, Homography, HomographyBounds};
pub use matchset::{Match, MatchSet};
pub use metrics::{auc, auc_table};
pub use pose::{angle_between_deg, pose_error, pose_error_parts, rotation_angle_deg, RelativePose};
pub use synth::{gt_correspondence, GtField, SyntheticPair, Truth, TwoViewTruth};
