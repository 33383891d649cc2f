use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use super::correspondence::CorrespondenceSet;
use super::decompose::{sampson_rms, sampson_sq, PoseHypothesis};
use super::five_point::{epipolar_row, five_point};
use super::homography::smallest_right_singular_vector;
use super::ransac::{required_iterations, Best, RansacConfig, Sampler};
use super::spread::point_spread;
use crate::error::{AcrError, Result};
use crate::geometry::{ImageSize, Intrinsics, Mat3, Rotation, Vec3};

/// Minimal solver used inside the essential-matrix RANSAC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum EpipolarSolver {
    /// Normalized linear eight-point solver.
    #[default]
    EightPoint,
    /// Five-point polynomial solver; also valid for planar scenes.
    FivePoint,
}

impl EpipolarSolver {
    pub fn sample_size(self) -> usize {
        match self {
            EpipolarSolver::EightPoint => 8,
            EpipolarSolver::FivePoint => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EpipolarConfig {
    pub ransac: RansacConfig,
    pub solver: EpipolarSolver,
}

/// Hartley normalization of calibrated bearings (unit last component).
fn normalize_bearings(x: &[Vec3]) -> (Vec<Vec3>, Mat3) {
    let n = x.len() as f64;
    let (mx, my) = x.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (mx, my) = (mx / n, my / n);
    let mean = x.iter().map(|p| (p.x - mx).hypot(p.y - my)).sum::<f64>() / n;
    let s = if mean > 0.0 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    let t = Mat3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0);
    (x.iter().map(|p| t * p).collect(), t)
}

/// Closest essential matrix (two equal singular values, one zero).
fn project_to_essential(e: &Mat3) -> Option<Mat3> {
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    let s = (sv[0].1 + sv[1].1) / 2.0;
    if s <= 0.0 || !s.is_finite() {
        return None;
    }
    let mut d = Mat3::zeros();
    d[(sv[0].0, sv[0].0)] = 1.0;
    d[(sv[1].0, sv[1].0)] = 1.0;
    Some(u * d * vt)
}

/// Normalized linear solver for at least eight calibrated pairs.
pub fn eight_point(xa: &[Vec3], xb: &[Vec3]) -> Option<Mat3> {
    if xa.len() < 8 || xa.len() != xb.len() {
        return None;
    }
    let (na, ta) = normalize_bearings(xa);
    let (nb, tb) = normalize_bearings(xb);
    let rows = xa.len().max(9);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for (i, (a, b)) in na.iter().zip(&nb).enumerate() {
        for (c, v) in epipolar_row(a, b).iter().enumerate() {
            m[(i, c)] = *v;
        }
    }
    let v = smallest_right_singular_vector(m).ok()?;
    let en = Mat3::from_row_slice(v.as_slice());
    let e = tb.transpose() * en * ta;
    project_to_essential(&e)
}

/// Least-squares depths `(λa, λb)` with `λb x_b ≈ λa R x_a + t`.
fn triangulate_depths(r: &Mat3, t: &Vec3, xa: &Vec3, xb: &Vec3) -> Option<(f64, f64)> {
    let u = r * xa;
    let v = -xb;
    let (uu, uv, vv) = (u.dot(&u), u.dot(&v), v.dot(&v));
    let det = uu * vv - uv * uv;
    if det.abs() <= 1e-12 * uu * vv {
        return None;
    }
    let (ut, vt) = (-u.dot(t), -v.dot(t));
    let la = (vv * ut - uv * vt) / det;
    let lb = (uu * vt - uv * ut) / det;
    Some((la, lb))
}

/// The four `(R, t)` factorizations of an essential matrix.
pub fn essential_candidates(e: &Mat3) -> Option<[(Mat3, Vec3); 4]> {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u?, svd.v_t?);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    u = Mat3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    vt = Mat3::from_rows(&[vt.row(order[0]), vt.row(order[1]), vt.row(order[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vec3 = u.column(2).into_owned();
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Picks the factorization placing the most pairs in front of both cameras.
fn cheirality_vote(e: &Mat3, xa: &[Vec3], xb: &[Vec3]) -> Option<(Mat3, Vec3, usize)> {
    let cands = essential_candidates(e)?;
    cands
        .iter()
        .map(|(r, t)| {
            let count = xa
                .iter()
                .zip(xb)
                .filter(|(a, b)| {
                    matches!(triangulate_depths(r, t, a, b), Some((la, lb)) if la > 0.0 && lb > 0.0)
                })
                .count();
            (*r, *t, count)
        })
        .max_by_key(|c| c.2)
}

fn fundamental(intr: &Intrinsics, e: &Mat3) -> Mat3 {
    let kinv = intr.inverse_matrix();
    kinv.transpose() * e * kinv
}

/// Relative pose `x_b = R x_a + t` from the essential matrix of unrestricted
/// correspondences, robustly estimated with RANSAC under the Sampson distance.
///
/// When a rotation alone explains the inliers, `unstable_translation` is set;
/// for data with no parallax at all the direction is `None`.
pub fn estimate_epipolar(
    c: &CorrespondenceSet,
    intr: &Intrinsics,
    image: ImageSize,
    cfg: &EpipolarConfig,
) -> Result<PoseHypothesis> {
    intr.validate()?;
    let needed = cfg.solver.sample_size().max(8);
    let n = c.len();
    if n < needed {
        return Err(AcrError::InsufficientData { needed, got: n });
    }
    let thr = cfg.ransac.threshold_px;
    let spread = point_spread(&c.points_a(), image)?;

    let mut disp: Vec<f64> = c.iter().map(|p| p.a.distance(&p.b)).collect();
    disp.sort_by(|a, b| a.total_cmp(b));
    if disp[n / 2] <= thr {
        return Ok(PoseHypothesis {
            rotation: Rotation::identity(),
            direction: None,
            plane_normal: None,
            support: disp.iter().filter(|&&d| d <= thr).count(),
            spread,
            residual: 0.0,
            unstable_translation: true,
        });
    }

    let xa: Vec<Vec3> = c.iter().map(|p| intr.normalize(&p.a)).collect();
    let xb: Vec<Vec3> = c.iter().map(|p| intr.normalize(&p.b)).collect();
    let pts: Vec<[f64; 4]> = c.iter().map(|p| [p.a.u, p.a.v, p.b.u, p.b.v]).collect();
    let thr2 = thr * thr;
    let score = |e: &Mat3, best_count: usize| -> Option<(usize, f64)> {
        let f = fundamental(intr, e);
        let mut count = 0;
        let mut cost = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let d2 = sampson_sq(&f, p[0], p[1], p[2], p[3]);
            if d2 <= thr2 {
                count += 1;
                cost += d2;
            }
            if count + (n - i - 1) < best_count {
                return None;
            }
        }
        Some((count, cost))
    };
    let solve = |ia: &[Vec3], ib: &[Vec3]| -> Vec<Mat3> {
        match cfg.solver {
            EpipolarSolver::EightPoint => eight_point(ia, ib).into_iter().collect(),
            EpipolarSolver::FivePoint => five_point(ia, ib),
        }
    };

    let k = cfg.solver.sample_size();
    let mut best: Best<Mat3> = Best::new();
    let mut sampler = Sampler::new(cfg.ransac.seed, n, k);
    let mut budget = cfg.ransac.max_iters;
    let mut iter = 0;
    while iter < budget {
        iter += 1;
        let idx = sampler.draw();
        let sa: Vec<Vec3> = idx.iter().map(|&i| xa[i]).collect();
        let sb: Vec<Vec3> = idx.iter().map(|&i| xb[i]).collect();
        for e in solve(&sa, &sb) {
            if let Some((count, cost)) = score(&e, best.count) {
                if best.offer(e, count, cost) {
                    let w = count as f64 / n as f64;
                    budget = budget.min(required_iterations(w, k, cfg.ransac.confidence));
                }
            }
        }
    }
    let mut e_best = best
        .model
        .ok_or_else(|| AcrError::DegenerateModel("no essential matrix found".into()))?;
    if best.count < needed {
        return Err(AcrError::DegenerateModel(format!(
            "only {} inliers",
            best.count
        )));
    }

    let inlier_mask = |e: &Mat3| -> Vec<bool> {
        let f = fundamental(intr, e);
        pts.iter()
            .map(|p| sampson_sq(&f, p[0], p[1], p[2], p[3]) <= thr2)
            .collect()
    };
    let mask = inlier_mask(&e_best);
    let ia: Vec<Vec3> = (0..n).filter(|&i| mask[i]).map(|i| xa[i]).collect();
    let ib: Vec<Vec3> = (0..n).filter(|&i| mask[i]).map(|i| xb[i]).collect();
    for e in solve(&ia, &ib) {
        if let Some((count, cost)) = score(&e, best.count) {
            best.offer(e, count, cost);
        }
    }
    e_best = best.model.expect("a model was already accepted");
    let mask = inlier_mask(&e_best);
    let ia: Vec<Vec3> = (0..n).filter(|&i| mask[i]).map(|i| xa[i]).collect();
    let ib: Vec<Vec3> = (0..n).filter(|&i| mask[i]).map(|i| xb[i]).collect();

    let (r, t, _) = cheirality_vote(&e_best, &ia, &ib)
        .ok_or_else(|| AcrError::DegenerateModel("essential matrix factorization failed".into()))?;
    let rotation = Rotation::nearest(&r);
    let inliers = c.subset(&(0..n).filter(|&i| mask[i]).collect::<Vec<_>>());
    let residual = sampson_rms(intr, rotation.matrix(), &t, &inliers);

    let h_inf = intr.matrix() * rotation.matrix() * intr.inverse_matrix();
    let mut transfer: Vec<f64> = inliers
        .iter()
        .map(|p| {
            let q = h_inf * p.a.homogeneous();
            (q.x / q.z - p.b.u).hypot(q.y / q.z - p.b.v)
        })
        .collect();
    transfer.sort_by(|a, b| a.total_cmp(b));
    let unstable = transfer[transfer.len() / 2] <= thr;

    Ok(PoseHypothesis {
        rotation,
        direction: Some(t.normalize()),
        plane_normal: None,
        support: inliers.len(),
        spread,
        residual,
        unstable_translation: unstable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{direction_angle, rotation_error_deg, PixelPoint, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(1000.0, 1000.0, 640.0, 480.0).unwrap()
    }

    const IMG: ImageSize = ImageSize {
        width: 1280,
        height: 960,
    };

    fn general_pairs(pose: &Pose, n: usize, seed: u64) -> CorrespondenceSet {
        let k = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        while pairs.len() < n {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(2.0..5.0),
            );
            let y = pose.transform_point(&x);
            if y.z <= 0.5 {
                continue;
            }
            pairs.push((k.to_pixel(&x), k.to_pixel(&y)));
        }
        CorrespondenceSet::from_pairs(&pairs).unwrap()
    }

    #[test]
    fn noiseless_general_scene() {
        let pose = Pose::new(Rotation::rz_deg(10.0), Vec3::new(0.0, 0.2, 0.0));
        let c = general_pairs(&pose, 60, 1);
        for solver in [EpipolarSolver::EightPoint, EpipolarSolver::FivePoint] {
            let cfg = EpipolarConfig {
                solver,
                ..Default::default()
            };
            let hyp = estimate_epipolar(&c, &intr(), IMG, &cfg).unwrap();
            assert!(
                rotation_error_deg(&hyp.rotation, &pose.rotation) < 1e-4,
                "{solver:?}"
            );
            let dir = hyp.direction.unwrap();
            assert!(
                direction_angle(&dir, &Vec3::y()).unwrap() < 1e-3,
                "{solver:?}"
            );
            assert!(!hyp.unstable_translation);
            assert_eq!(hyp.support, 60);
        }
    }

    #[test]
    fn identity_flags_unstable_translation() {
        let pts: Vec<_> = (0..20)
            .map(|i| {
                let p = PixelPoint::new(50.0 * i as f64, 30.0 * (i % 7) as f64);
                (p, p)
            })
            .collect();
        let c = CorrespondenceSet::from_pairs(&pts).unwrap();
        let hyp = estimate_epipolar(&c, &intr(), IMG, &EpipolarConfig::default()).unwrap();
        assert!(hyp.unstable_translation);
        assert!(hyp.is_zero_motion());
    }

    #[test]
    fn pure_rotation_flags_unstable_translation() {
        let pose = Pose::from_rotation(Rotation::ry_deg(3.0));
        let c = general_pairs(&pose, 40, 2);
        let cfg = EpipolarConfig {
            solver: EpipolarSolver::FivePoint,
            ..Default::default()
        };
        let hyp = estimate_epipolar(&c, &intr(), IMG, &cfg).unwrap();
        assert!(hyp.unstable_translation);
    }

    #[test]
    fn too_few_pairs() {
        let c = general_pairs(&Pose::identity(), 7, 3);
        assert!(matches!(
            estimate_epipolar(&c, &intr(), IMG, &EpipolarConfig::default()),
            Err(AcrError::InsufficientData { needed: 8, got: 7 })
        ));
    }

    #[test]
    fn ransac_rejects_outliers() {
        let pose = Pose::new(Rotation::rx_deg(4.0), Vec3::new(0.1, 0.0, 0.05));
        let c = general_pairs(&pose, 100, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut items = c.items().to_vec();
        for it in items.iter_mut().take(30) {
            it.b = PixelPoint::new(rng.gen_range(0.0..1280.0), rng.gen_range(0.0..960.0));
        }
        let c = CorrespondenceSet::new(items).unwrap();
        let hyp = estimate_epipolar(&c, &intr(), IMG, &EpipolarConfig::default()).unwrap();
        assert!(rotation_error_deg(&hyp.rotation, &pose.rotation) < 1e-6);
    }

    #[test]
    fn eight_point_matches_truth_exactly() {
        let pose = Pose::new(Rotation::ry_deg(-6.0), Vec3::new(-0.3, 0.1, 0.2));
        let c = general_pairs(&pose, 30, 5);
        let k = intr();
        let xa: Vec<Vec3> = c.iter().map(|p| k.normalize(&p.a)).collect();
        let xb: Vec<Vec3> = c.iter().map(|p| k.normalize(&p.b)).collect();
        let e = eight_point(&xa, &xb).unwrap();
        let truth = super::super::decompose::skew(&pose.translation) * pose.rotation.matrix();
        let truth = truth / truth.norm() * 2f64.sqrt();
        assert!((e - truth).norm().min((e + truth).norm()) < 1e-9);
    }
}
