use serde::Serialize;

use crate::error::{AcrError, Result};
use crate::geometry::{direction_angle, rotation_error_deg, DirectionalPose, PixelPoint, Pose};

/// Average feature-point displacement between matched point lists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AfdReport {
    /// Mean Euclidean displacement, pixels.
    pub afd: f64,
    pub match_count: usize,
}

pub fn afd(ref_points: &[PixelPoint], cur_points: &[PixelPoint]) -> Result<AfdReport> {
    if ref_points.is_empty() {
        return Err(AcrError::InvalidInput("no points".into()));
    }
    if ref_points.len() != cur_points.len() {
        return Err(AcrError::InvalidInput(format!(
            "{} reference points but {} current points",
            ref_points.len(),
            cur_points.len()
        )));
    }
    let sum: f64 = ref_points
        .iter()
        .zip(cur_points)
        .map(|(a, b)| (a.u - b.u).hypot(a.v - b.v))
        .sum();
    Ok(AfdReport {
        afd: sum / ref_points.len() as f64,
        match_count: ref_points.len(),
    })
}

/// Angular errors of an estimate against the true relative pose, degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    /// `None` when the true translation is zero.
    pub direction_deg: Option<f64>,
}

pub fn pose_error(est: &DirectionalPose, truth: &Pose) -> PoseError {
    PoseError {
        rotation_deg: rotation_error_deg(&est.rotation, &truth.rotation),
        direction_deg: direction_angle(est.direction(), &truth.translation).ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, Vec3};
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<PixelPoint> {
        v.iter().map(|&(u, v)| PixelPoint::new(u, v)).collect()
    }

    #[test]
    fn identical_lists_have_zero_afd() {
        let p = pts(&[(1.0, 2.0), (30.0, 40.0)]);
        assert_eq!(afd(&p, &p).unwrap().afd, 0.0);
    }

    #[test]
    fn constant_displacement() {
        let a = pts(&[(0.0, 0.0), (10.0, 5.0), (-3.0, 7.0)]);
        let b: Vec<_> = a
            .iter()
            .map(|p| PixelPoint::new(p.u + 3.0, p.v + 4.0))
            .collect();
        let r = afd(&a, &b).unwrap();
        assert_eq!(r.afd, 5.0);
        assert_eq!(r.match_count, 3);
    }

    #[test]
    fn bad_lists_are_rejected() {
        assert!(matches!(afd(&[], &[]), Err(AcrError::InvalidInput(_))));
        let a = pts(&[(0.0, 0.0)]);
        assert!(matches!(
            afd(&a, &pts(&[(0.0, 0.0), (1.0, 1.0)])),
            Err(AcrError::InvalidInput(_))
        ));
    }

    #[test]
    fn exact_estimate_has_zero_error() {
        let r = Rotation::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 0.2);
        let t = Vec3::new(0.02, -0.01, 0.05);
        let e = pose_error(&DirectionalPose::new(r, t).unwrap(), &Pose::new(r, t));
        assert!(e.rotation_deg < 1e-12);
        assert!(e.direction_deg.unwrap() < 1e-12);
    }

    #[test]
    fn rotation_offset_is_reported_in_degrees() {
        let off = Rotation::from_axis_angle(&Vec3::z(), 1f64.to_radians());
        let t = Vec3::new(0.0, 0.0, 1.0);
        let e = pose_error(
            &DirectionalPose::new(off, t).unwrap(),
            &Pose::new(Rotation::identity(), t),
        );
        assert!((e.rotation_deg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_truth_translation_has_no_direction_error() {
        let est = DirectionalPose::new(Rotation::identity(), Vec3::x()).unwrap();
        assert_eq!(pose_error(&est, &Pose::identity()).direction_deg, None);
    }

    proptest! {
        #[test]
        fn matches_hand_summed_oracle(d in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..40)) {
            let a: Vec<_> = (0..d.len()).map(|i| PixelPoint::new(i as f64, 2.0 * i as f64)).collect();
            let b: Vec<_> = a.iter().zip(&d).map(|(p, &(du, dv))| PixelPoint::new(p.u + du, p.v + dv)).collect();
            let mut oracle = 0.0;
            for &(du, dv) in &d {
                oracle += (du * du + dv * dv).sqrt();
            }
            oracle /= d.len() as f64;
            prop_assert!((afd(&a, &b).unwrap().afd - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }

        #[test]
        fn translation_equivariant_and_linear(
            d in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 1..30),
            shift in (-100.0..100.0f64, -100.0..100.0f64),
            k in 0.1..10.0f64,
        ) {
            let a: Vec<_> = (0..d.len()).map(|i| PixelPoint::new(3.0 * i as f64, 100.0 - i as f64)).collect();
            let b: Vec<_> = a.iter().zip(&d).map(|(p, &(du, dv))| PixelPoint::new(p.u + du, p.v + dv)).collect();
            let base = afd(&a, &b).unwrap().afd;
            let mv = |v: &[PixelPoint]| v.iter().map(|p| PixelPoint::new(p.u + shift.0, p.v + shift.1)).collect::<Vec<_>>();
            prop_assert!((afd(&mv(&a), &mv(&b)).unwrap().afd - base).abs() <= 1e-9 * base.max(1.0));
            let bk: Vec<_> = a.iter().zip(&d).map(|(p, &(du, dv))| PixelPoint::new(p.u + k * du, p.v + k * dv)).collect();
            prop_assert!((afd(&a, &bk).unwrap().afd - k * base).abs() <= 1e-9 * (k * base).max(1.0));
        }
    }
}
