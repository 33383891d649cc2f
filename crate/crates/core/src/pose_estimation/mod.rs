//! Two-view relative pose: plane-induced homographies and their
//! decomposition, plus an essential-matrix path for comparison.

mod correspondence;
mod decompose;
mod epipolar;
mod five_point;
mod homography;
mod ransac;
mod spread;

pub use correspondence::{Correspondence, CorrespondenceFile, CorrespondenceSet, TrackId};
pub use decompose::{
    decompose_homography, decompose_homography_candidates, factor_homography, FactorResult,
    HomographyCandidate, PoseHypothesis, ZERO_MOTION_TOL,
};
pub use epipolar::{
    eight_point, essential_candidates, estimate_epipolar, EpipolarConfig, EpipolarSolver,
};
pub use five_point::five_point;
pub use homography::{
    estimate_homography_ransac, fit_homography_dlt, homography_from_plane,
    symmetric_transfer_error, Homography,
};
pub use ransac::RansacConfig;
pub use spread::point_spread;
