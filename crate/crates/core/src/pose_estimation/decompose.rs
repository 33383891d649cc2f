use serde::Serialize;

use super::correspondence::CorrespondenceSet;
use super::homography::Homography;
use super::spread::point_spread;
use crate::error::{AcrError, Result};
use crate::geometry::{DirectionalPose, ImageSize, Intrinsics, Mat3, Rotation, Vec3};

/// Relative singular-value gap below which a homography is treated as a pure
/// rotation (zero baseline).
pub const ZERO_MOTION_TOL: f64 = 1e-7;

/// Two candidates whose reprojection residuals differ by less than this many
/// pixels (plus [`RESIDUAL_TIE_REL`] of the smaller) are considered tied.
const RESIDUAL_TIE_ABS: f64 = 1e-3;
const RESIDUAL_TIE_REL: f64 = 0.01;

/// One relative-pose estimate from a single image pair or plane pair.
///
/// `direction` is `None` when the motion has no measurable baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseHypothesis {
    pub rotation: Rotation,
    pub direction: Option<Vec3>,
    /// Plane normal in the image-A camera frame, for homography-based estimates.
    pub plane_normal: Option<Vec3>,
    pub support: usize,
    pub spread: f64,
    /// RMS reprojection residual of the supporting pairs in pixels: plane transfer
    /// for homography estimates, Sampson distance for epipolar ones.
    pub residual: f64,
    /// Set when the data are explained by a rotation alone, so the direction
    /// (if any) is not trustworthy.
    pub unstable_translation: bool,
}

impl PoseHypothesis {
    pub fn is_zero_motion(&self) -> bool {
        self.direction.is_none()
    }

    pub fn pose(&self) -> Option<DirectionalPose> {
        self.direction
            .and_then(|d| DirectionalPose::new(self.rotation, d).ok())
    }
}

/// One analytic factorization `K⁻¹HK ∝ R + τ nᵀ` of a homography.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyCandidate {
    pub rotation: Rotation,
    /// Translation divided by the plane distance in the image-A frame.
    pub scaled_translation: Vec3,
    pub normal: Vec3,
}

/// Factorizations of a calibrated homography.
///
/// A homography with (numerically) equal singular values is a pure rotation;
/// otherwise the analytic solutions that reproduce it are returned, before any
/// cheirality filtering.
pub fn factor_homography(h: &Homography, intr: &Intrinsics) -> Result<FactorResult> {
    let a = intr.inverse_matrix() * h.matrix() * intr.matrix();
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let d1 = svd.singular_values[order[0]];
    let d2 = svd.singular_values[order[1]];
    let d3 = svd.singular_values[order[2]];
    let u = Mat3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v = Mat3::from_columns(&[
        vt.row(order[0]).transpose(),
        vt.row(order[1]).transpose(),
        vt.row(order[2]).transpose(),
    ]);
    if d3 <= 0.0 || !d1.is_finite() {
        return Err(AcrError::DegenerateModel(
            "singular calibrated homography".into(),
        ));
    }
    if (d1 - d3) <= ZERO_MOTION_TOL * d2 {
        let sign = if a.determinant() < 0.0 { -1.0 } else { 1.0 };
        return Ok(FactorResult::PureRotation(Rotation::nearest(&(a * sign))));
    }

    let s = u.determinant() * v.determinant();
    let (d1s, d2s, d3s) = (d1 * d1, d2 * d2, d3 * d3);
    let aux1 = ((d1s - d2s) / (d1s - d3s)).max(0.0).sqrt();
    let aux3 = ((d2s - d3s) / (d1s - d3s)).max(0.0).sqrt();
    let x1 = [aux1, aux1, -aux1, -aux1];
    let x3 = [aux3, -aux3, aux3, -aux3];
    let aux_stheta = ((d1s - d2s) * (d2s - d3s)).max(0.0).sqrt() / ((d1 + d3) * d2);
    let ctheta = (d2s + d1 * d3) / ((d1 + d3) * d2);
    let stheta = [aux_stheta, -aux_stheta, -aux_stheta, aux_stheta];

    // `A / (s·d2) = R + τ nᵀ` for the factorizations with d' = +d2.
    let a_hat = a / (s * d2);
    let mut out = Vec::with_capacity(4);
    for i in 0..4 {
        let rp = Mat3::new(
            ctheta, 0.0, -stheta[i], //
            0.0, 1.0, 0.0, //
            stheta[i], 0.0, ctheta,
        );
        let r = s * u * rp * v.transpose();
        let n = (v * Vec3::new(x1[i], 0.0, x3[i])).normalize();
        let tau = a_hat * n - r * n;
        let rot = Rotation::nearest(&r);
        let recon = rot.matrix() + tau * n.transpose();
        if (recon - a_hat).amax() > 1e-6 * a_hat.amax() {
            continue;
        }
        out.push(HomographyCandidate {
            rotation: rot,
            scaled_translation: tau,
            normal: n,
        });
    }
    Ok(FactorResult::Motion(out))
}

#[derive(Clone, Debug, PartialEq)]
pub enum FactorResult {
    PureRotation(Rotation),
    Motion(Vec<HomographyCandidate>),
}

/// Whether every pair reconstructs in front of both cameras on the plane of
/// the candidate.
fn passes_cheirality(cand: &HomographyCandidate, xa: &[Vec3]) -> bool {
    xa.iter().all(|x| {
        let w = cand.normal.dot(x);
        if w <= 0.0 {
            return false;
        }
        let p = x / w;
        let q = cand.rotation.apply(&p) + cand.scaled_translation;
        q.z > 0.0
    })
}

/// RMS pixel distance between each B point and its A point carried through
/// the candidate plane into image B.
fn transfer_rms(
    intr: &Intrinsics,
    cand: &HomographyCandidate,
    xa: &[Vec3],
    c: &CorrespondenceSet,
) -> f64 {
    if xa.is_empty() {
        return 0.0;
    }
    let sum: f64 = xa
        .iter()
        .zip(c.iter())
        .map(|(x, p)| {
            let q = cand.rotation.apply(&(x / cand.normal.dot(x))) + cand.scaled_translation;
            let b = intr.to_pixel(&q);
            (b.u - p.b.u).powi(2) + (b.v - p.b.v).powi(2)
        })
        .sum();
    (sum / xa.len() as f64).sqrt()
}

/// RMS Sampson distance, in pixels, of the pairs under `E = [t]ₓR`.
pub(crate) fn sampson_rms(
    intr: &Intrinsics,
    rotation: &Mat3,
    translation: &Vec3,
    c: &CorrespondenceSet,
) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let e = skew(translation) * rotation;
    let f = intr.inverse_matrix().transpose() * e * intr.inverse_matrix();
    let sum: f64 = c
        .iter()
        .map(|p| sampson_sq(&f, p.a.u, p.a.v, p.b.u, p.b.v))
        .sum();
    (sum / c.len() as f64).sqrt()
}

pub(crate) fn skew(t: &Vec3) -> Mat3 {
    Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Squared Sampson distance of `(ua, va) ↔ (ub, vb)` under a fundamental
/// matrix mapping A points to lines in B.
#[inline]
pub(crate) fn sampson_sq(f: &Mat3, ua: f64, va: f64, ub: f64, vb: f64) -> f64 {
    let fa0 = f[(0, 0)] * ua + f[(0, 1)] * va + f[(0, 2)];
    let fa1 = f[(1, 0)] * ua + f[(1, 1)] * va + f[(1, 2)];
    let fa2 = f[(2, 0)] * ua + f[(2, 1)] * va + f[(2, 2)];
    let ftb0 = f[(0, 0)] * ub + f[(1, 0)] * vb + f[(2, 0)];
    let ftb1 = f[(0, 1)] * ub + f[(1, 1)] * vb + f[(2, 1)];
    let num = ub * fa0 + vb * fa1 + fa2;
    let den = fa0 * fa0 + fa1 * fa1 + ftb0 * ftb0 + ftb1 * ftb1;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num * num / den
}

/// Cheirality-consistent factorizations of `h`, best first.
///
/// Candidates are ordered by reprojection residual over `c`; residuals within a
/// small band are treated as tied and ordered by how squarely the plane faces
/// camera A. A pure rotation yields a single hypothesis without direction.
pub fn decompose_homography_candidates(
    h: &Homography,
    intr: &Intrinsics,
    c: &CorrespondenceSet,
    image: ImageSize,
) -> Result<Vec<PoseHypothesis>> {
    intr.validate()?;
    let spread = if c.is_empty() {
        0.0
    } else {
        point_spread(&c.points_a(), image)?
    };
    let xa: Vec<Vec3> = c.iter().map(|p| intr.normalize(&p.a)).collect();
    let cands = match factor_homography(h, intr)? {
        FactorResult::PureRotation(r) => {
            return Ok(vec![PoseHypothesis {
                rotation: r,
                direction: None,
                plane_normal: None,
                support: c.len(),
                spread,
                residual: 0.0,
                unstable_translation: true,
            }])
        }
        FactorResult::Motion(c) => c,
    };
    let mean_bearing = xa
        .iter()
        .fold(Vec3::zeros(), |acc, x| acc + x.normalize())
        .try_normalize(0.0)
        .unwrap_or(Vec3::z());
    let mut scored: Vec<(f64, f64, PoseHypothesis)> = cands
        .into_iter()
        .filter(|cand| passes_cheirality(cand, &xa))
        .filter_map(|cand| {
            let dir = cand.scaled_translation.try_normalize(1e-300)?;
            let residual = transfer_rms(intr, &cand, &xa, c);
            let frontality = cand.normal.dot(&mean_bearing).abs();
            Some((
                residual,
                frontality,
                PoseHypothesis {
                    rotation: cand.rotation,
                    direction: Some(dir),
                    plane_normal: Some(cand.normal),
                    support: c.len(),
                    spread,
                    residual,
                    unstable_translation: false,
                },
            ))
        })
        .collect();
    scored.sort_by(|a, b| {
        let band = RESIDUAL_TIE_ABS + RESIDUAL_TIE_REL * a.0.min(b.0);
        if (a.0 - b.0).abs() <= band {
            b.1.total_cmp(&a.1)
        } else {
            a.0.total_cmp(&b.0)
        }
    });
    Ok(scored.into_iter().map(|(_, _, h)| h).collect())
}

/// Relative pose `x_b = R x_a + t` (unit `t`) from a plane-induced homography.
///
/// A pure-rotation homography yields a hypothesis without direction.
pub fn decompose_homography(
    h: &Homography,
    intr: &Intrinsics,
    c: &CorrespondenceSet,
    image: ImageSize,
) -> Result<PoseHypothesis> {
    decompose_homography_candidates(h, intr, c, image)?
        .into_iter()
        .next()
        .ok_or(AcrError::CheiralityFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{direction_angle, rotation_error_deg, PixelPoint, Pose};
    use crate::pose_estimation::homography::{fit_homography_dlt, homography_from_plane};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(1000.0, 1000.0, 640.0, 480.0).unwrap()
    }

    fn image() -> ImageSize {
        ImageSize::new(1280, 960)
    }

    /// Pairs from points on `nᵀX = d` seen before and after `x_b = R x_a + t`.
    fn planar_pairs(pose: &Pose, normal: Vec3, d: f64, n: usize, seed: u64) -> CorrespondenceSet {
        let k = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        while pairs.len() < n {
            let pa = PixelPoint::new(rng.gen_range(100.0..1180.0), rng.gen_range(100.0..860.0));
            let ray = k.normalize(&pa);
            let x = ray * (d / normal.dot(&ray));
            let xb = pose.transform_point(&x);
            if x.z <= 0.0 || xb.z <= 0.0 {
                continue;
            }
            pairs.push((pa, k.to_pixel(&xb)));
        }
        CorrespondenceSet::from_pairs(&pairs).unwrap()
    }

    fn exact_h(pose: &Pose, normal: Vec3, d: f64) -> Homography {
        Homography::from_matrix(homography_from_plane(
            &intr(),
            pose.rotation.matrix(),
            &pose.translation,
            &normal,
            d,
        ))
        .unwrap()
    }

    #[test]
    fn identity_is_zero_motion() {
        let c = planar_pairs(&Pose::identity(), Vec3::z(), 2.0, 10, 1);
        let hyp = decompose_homography(&Homography::identity(), &intr(), &c, image()).unwrap();
        assert!(hyp.is_zero_motion());
        assert!(rotation_error_deg(&hyp.rotation, &Rotation::identity()) < 1e-12);
    }

    #[test]
    fn pure_rotation_is_zero_motion() {
        let pose = Pose::from_rotation(Rotation::ry_deg(4.0));
        let h = exact_h(&pose, Vec3::z(), 2.0);
        let c = planar_pairs(&pose, Vec3::z(), 2.0, 20, 2);
        let hyp = decompose_homography(&h, &intr(), &c, image()).unwrap();
        assert!(hyp.is_zero_motion());
        assert!(rotation_error_deg(&hyp.rotation, &pose.rotation) < 1e-9);
    }

    #[test]
    fn fronto_parallel_plane_lateral_motion() {
        let pose = Pose::new(Rotation::rz_deg(5.0), Vec3::new(0.1, 0.0, 0.0));
        let c = planar_pairs(&pose, Vec3::z(), 2.0, 50, 3);
        let h = fit_homography_dlt(&c.points_a(), &c.points_b()).unwrap();
        let hyp = decompose_homography(&h, &intr(), &c, image()).unwrap();
        assert!(rotation_error_deg(&hyp.rotation, &pose.rotation) < 1e-6);
        let dir = hyp.direction.unwrap();
        assert!(direction_angle(&dir, &Vec3::x()).unwrap() < 1e-6);
        assert!((hyp.plane_normal.unwrap() - Vec3::z()).norm() < 1e-8);
        assert_eq!(hyp.support, 50);
    }

    #[test]
    fn scale_of_h_does_not_matter() {
        let pose = Pose::new(Rotation::rx_deg(-3.0), Vec3::new(0.02, -0.05, 0.1));
        let n = Vec3::new(0.2, -0.1, 1.0).normalize();
        let c = planar_pairs(&pose, n, 1.5, 40, 4);
        let h = exact_h(&pose, n, 1.5);
        let a = decompose_homography(&h, &intr(), &c, image()).unwrap();
        let scaled = Homography::from_matrix(h.matrix() * -7.3).unwrap();
        let b = decompose_homography(&scaled, &intr(), &c, image()).unwrap();
        assert!(rotation_error_deg(&a.rotation, &b.rotation) < 1e-9);
        assert!(direction_angle(&a.direction.unwrap(), &b.direction.unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn true_solution_is_among_candidates_for_random_motions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let axis = Vec3::new(rng.gen(), rng.gen(), rng.gen()) - Vec3::repeat(0.5);
            let rot = Rotation::from_axis_angle(&axis, rng.gen_range(0.0..0.2));
            let t = Vec3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            let pose = Pose::new(rot, t);
            let n = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 1.0).normalize();
            let d = rng.gen_range(0.8..3.0);
            let c = planar_pairs(&pose, n, d, 30, trial);
            let h = exact_h(&pose, n, d);
            let cands = decompose_homography_candidates(&h, &intr(), &c, image()).unwrap();
            assert!(!cands.is_empty() && cands.len() <= 4);
            let found = cands.iter().any(|hyp| {
                rotation_error_deg(&hyp.rotation, &pose.rotation) < 1e-6
                    && direction_angle(&hyp.direction.unwrap(), &t).unwrap() < 1e-5
                    && (hyp.plane_normal.unwrap() - n).norm() < 1e-6
            });
            assert!(found, "trial {trial}: truth missing from {cands:?}");
        }
    }

    #[test]
    fn points_beyond_the_horizon_fail_cheirality() {
        let pose = Pose::new(Rotation::ry_deg(2.0), Vec3::new(0.1, 0.0, 0.05));
        let n = Vec3::new(1.0, 0.0, 0.2).normalize();
        let h = exact_h(&pose, n, 1.0);
        let k = intr();
        // A grid straddling the vanishing line of every candidate plane.
        let mut pairs = Vec::new();
        for i in -4..=4 {
            for j in -4..=4 {
                let xa = Vec3::new(i as f64 * 0.5, j as f64 * 0.5, 1.0);
                let pb = h.matrix() * k.matrix() * xa;
                pairs.push((k.to_pixel(&xa), PixelPoint::new(pb.x / pb.z, pb.y / pb.z)));
            }
        }
        let c = CorrespondenceSet::from_pairs(&pairs).unwrap();
        assert!(matches!(
            decompose_homography(&h, &k, &c, image()),
            Err(AcrError::CheiralityFailure)
        ));
    }
}
