use nalgebra::{DMatrix, Matrix3};

use super::correspondence::CorrespondenceSet;
use super::ransac::{required_iterations, Best, RansacConfig, Sampler};
use crate::error::{AcrError, Result};
use crate::geometry::{Mat3, PixelPoint, Vec3};

/// Plane-induced homography mapping image-A pixels to image-B pixels,
/// normalized so its middle singular value is 1 and its determinant positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Mat3);

impl Homography {
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(AcrError::DegenerateModel("non-finite homography".into()));
        }
        let sv = m.singular_values();
        let (s_max, s_mid, s_min) = (sv.max(), median3(&sv), sv.min());
        if s_max == 0.0 || s_min <= 1e-12 * s_max {
            return Err(AcrError::DegenerateModel("singular homography".into()));
        }
        let mut h = m / s_mid;
        if h.determinant() < 0.0 {
            h = -h;
        }
        Ok(Homography(h))
    }

    pub fn identity() -> Self {
        Homography(Mat3::identity())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// Fails when round-off pushes a near-singular inverse past the
    /// conditioning limit.
    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| AcrError::DegenerateModel("singular homography".into()))?;
        Homography::from_matrix(inv)
    }

    pub fn map(&self, p: &PixelPoint) -> Option<PixelPoint> {
        apply(&self.0, p)
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.0.singular_values();
        sv.max() / sv.min()
    }
}

fn median3(v: &nalgebra::Vector3<f64>) -> f64 {
    let mut s = [v[0], v[1], v[2]];
    s.sort_by(|a, b| a.total_cmp(b));
    s[1]
}

#[inline]
fn apply(h: &Mat3, p: &PixelPoint) -> Option<PixelPoint> {
    let w = h[(2, 0)] * p.u + h[(2, 1)] * p.v + h[(2, 2)];
    if w.abs() < 1e-300 {
        return None;
    }
    Some(PixelPoint::new(
        (h[(0, 0)] * p.u + h[(0, 1)] * p.v + h[(0, 2)]) / w,
        (h[(1, 0)] * p.u + h[(1, 1)] * p.v + h[(1, 2)]) / w,
    ))
}

/// Root-mean-square of the forward (`H a` vs `b`) and backward (`H⁻¹ b` vs `a`)
/// transfer distances, pixels.
pub fn symmetric_transfer_error(h: &Mat3, h_inv: &Mat3, a: &PixelPoint, b: &PixelPoint) -> f64 {
    let fwd = apply(h, a).map_or(f64::INFINITY, |p| p.distance(b));
    let bwd = apply(h_inv, b).map_or(f64::INFINITY, |p| p.distance(a));
    ((fwd * fwd + bwd * bwd) / 2.0).sqrt()
}

/// Similarity that moves the centroid to the origin with mean distance √2.
fn normalizing_transform(points: &[PixelPoint]) -> Mat3 {
    let n = points.len() as f64;
    let (mu, mv) = points
        .iter()
        .fold((0.0, 0.0), |(su, sv), p| (su + p.u, sv + p.v));
    let (mu, mv) = (mu / n, mv / n);
    let mean_dist = points
        .iter()
        .map(|p| (p.u - mu).hypot(p.v - mv))
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mu, 0.0, s, -s * mv, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over all given pairs (at least 4).
pub fn fit_homography_dlt(a: &[PixelPoint], b: &[PixelPoint]) -> Result<Homography> {
    let n = a.len();
    if n < 4 || b.len() != n {
        return Err(AcrError::InsufficientData {
            needed: 4,
            got: n.min(b.len()),
        });
    }
    let ta = normalizing_transform(a);
    let tb = normalizing_transform(b);
    let rows = (2 * n).max(9);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let pa = ta * a[i].homogeneous();
        let pb = tb * b[i].homogeneous();
        let (x, y) = (pa.x / pa.z, pa.y / pa.z);
        let (u, v) = (pb.x / pb.z, pb.y / pb.z);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        m[(r0, 3)] = -x;
        m[(r0, 4)] = -y;
        m[(r0, 5)] = -1.0;
        m[(r0, 6)] = v * x;
        m[(r0, 7)] = v * y;
        m[(r0, 8)] = v;
        m[(r1, 0)] = x;
        m[(r1, 1)] = y;
        m[(r1, 2)] = 1.0;
        m[(r1, 6)] = -u * x;
        m[(r1, 7)] = -u * y;
        m[(r1, 8)] = -u;
    }
    let h_norm = smallest_right_singular_vector(m)?;
    let hn = Mat3::from_row_slice(h_norm.as_slice());
    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| AcrError::DegenerateModel("degenerate point normalization".into()))?;
    Homography::from_matrix(tb_inv * hn * ta)
}

pub(crate) fn smallest_right_singular_vector(m: DMatrix<f64>) -> Result<nalgebra::DVector<f64>> {
    let cols = m.ncols();
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| AcrError::DegenerateModel("svd failed".into()))?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    Ok(v_t
        .row(idx)
        .transpose()
        .into_owned()
        .rows(0, cols)
        .into_owned())
}

fn collinear(p: &PixelPoint, q: &PixelPoint, r: &PixelPoint) -> bool {
    let area = (q.u - p.u) * (r.v - p.v) - (q.v - p.v) * (r.u - p.u);
    let scale = p.distance(q).max(p.distance(r)).max(q.distance(r));
    area.abs() <= 1e-9 * scale * scale
}

fn sample_is_degenerate(pts: &[PixelPoint]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if collinear(&pts[i], &pts[j], &pts[k]) {
                    return true;
                }
            }
        }
    }
    false
}

/// Robust homography fit with a final normalized-DLT refit on the inliers.
///
/// Returns the homography and a per-pair inlier mask under the symmetric
/// transfer error. Deterministic for a fixed `cfg.seed`.
pub fn estimate_homography_ransac(
    c: &CorrespondenceSet,
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<bool>)> {
    let n = c.len();
    if n < 4 {
        return Err(AcrError::InsufficientData { needed: 4, got: n });
    }
    let a = c.points_a();
    let b = c.points_b();
    let score = |h: &Homography| -> (usize, f64, Vec<bool>) {
        let hm = *h.matrix();
        let Ok(hi) = h.inverse() else {
            return (0, f64::INFINITY, vec![false; n]);
        };
        let mut count = 0;
        let mut cost = 0.0;
        let mask: Vec<bool> = a
            .iter()
            .zip(&b)
            .map(|(pa, pb)| {
                let e = symmetric_transfer_error(&hm, hi.matrix(), pa, pb);
                let inlier = e <= cfg.threshold_px;
                if inlier {
                    count += 1;
                    cost += e;
                }
                inlier
            })
            .collect();
        (count, cost, mask)
    };

    let mut best: Best<(Homography, Vec<bool>)> = Best::new();
    let mut sampler = Sampler::new(cfg.seed, n, 4);
    let mut budget = cfg.max_iters;
    let mut iter = 0;
    while iter < budget {
        iter += 1;
        let idx = sampler.draw();
        let sa: Vec<PixelPoint> = idx.iter().map(|&i| a[i]).collect();
        let sb: Vec<PixelPoint> = idx.iter().map(|&i| b[i]).collect();
        if sample_is_degenerate(&sa) || sample_is_degenerate(&sb) {
            continue;
        }
        let Ok(h) = fit_homography_dlt(&sa, &sb) else {
            continue;
        };
        let (count, cost, mask) = score(&h);
        if best.offer((h, mask), count, cost) {
            let w = count as f64 / n as f64;
            budget = budget.min(required_iterations(w, 4, cfg.confidence));
        }
    }
    let (h0, mask0) = best
        .model
        .ok_or_else(|| AcrError::DegenerateModel("no non-degenerate sample".into()))?;
    if best.count < 4 {
        return Err(AcrError::DegenerateModel(format!(
            "only {} inliers",
            best.count
        )));
    }
    let (ia, ib): (Vec<PixelPoint>, Vec<PixelPoint>) =
        (0..n).filter(|&i| mask0[i]).map(|i| (a[i], b[i])).unzip();
    let refit = fit_homography_dlt(&ia, &ib).ok().map(|h| {
        let (count, cost, mask) = score(&h);
        (h, count, cost, mask)
    });
    match refit {
        Some((h, count, cost, mask))
            if count > best.count || (count == best.count && cost <= best.cost) =>
        {
            Ok((h, mask))
        }
        _ => Ok((h0, mask0)),
    }
}

/// Homography induced by a plane `nᵀx = d` (reference camera frame) under the
/// relative motion `x_b = R x_a + t`, in pixel coordinates.
pub fn homography_from_plane(
    k: &crate::geometry::Intrinsics,
    r: &Mat3,
    t: &Vec3,
    normal: &Vec3,
    offset: f64,
) -> Mat3 {
    k.matrix() * (r + t * normal.transpose() / offset) * k.inverse_matrix()
}
