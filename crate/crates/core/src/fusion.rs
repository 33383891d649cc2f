//! Per-plane pose fusion and the illumination-invariant pose estimation chain
//! (mask erosion, plane matching, per-plane homographies, fusion).

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use crate::error::{AcrError, Result};
use crate::geometry::{
    direction_angle, rotation_error_deg, DirectionalPose, Intrinsics, Rotation, Vec3,
};
use crate::plane_match::{
    match_prepared, PlaneMatchConfig, PlaneMatching, PlaneSegmentMap, PreparedMask,
};
use crate::pose_estimation::{
    decompose_homography_candidates, estimate_homography_ransac, CorrespondenceSet, PoseHypothesis,
    RansacConfig,
};

/// Unnormalized reliability of a hypothesis: `support × spread`.
pub fn hypothesis_weight(h: &PoseHypothesis) -> f64 {
    h.support as f64 * h.spread
}

/// Non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    /// Normalizes raw non-negative weights. All-zero weights become uniform.
    pub fn new(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(AcrError::InsufficientData { needed: 1, got: 0 });
        }
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AcrError::InvalidInput(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = raw.iter().sum();
        if sum == 0.0 {
            return Ok(FusionWeights(vec![1.0 / raw.len() as f64; raw.len()]));
        }
        Ok(FusionWeights(raw.iter().map(|w| w / sum).collect()))
    }

    pub fn from_hypotheses(hyps: &[PoseHypothesis]) -> Result<Self> {
        Self::new(&hyps.iter().map(hypothesis_weight).collect::<Vec<_>>())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Weighted rotation mean and weighted direction sum.
    #[default]
    WeightedMean,
    /// The single highest-weight hypothesis.
    WinnerTakeAll,
}

/// Weighted chordal mean of rotations: leading eigenvector of `Σ wᵢ qᵢ qᵢᵀ`.
fn mean_rotation(rotations: &[Rotation], weights: &[f64]) -> Rotation {
    let qs: Vec<_> = rotations.iter().map(|r| r.to_quaternion()).collect();
    let anchor = qs[0].coords;
    let mut m = Matrix4::zeros();
    for (q, &w) in qs.iter().zip(weights) {
        let mut v = q.coords;
        if v.dot(&anchor) < 0.0 {
            v = -v;
        }
        m += w * v * v.transpose();
    }
    let eig = m.symmetric_eigen();
    let (i, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("4×4 eigenproblem");
    let v = eig.eigenvectors.column(i).into_owned();
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(v));
    Rotation::from_quaternion(&q)
}

fn argmax(weights: &[f64]) -> usize {
    weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best })
}

/// Rotation and (optional) unit direction fused from several hypotheses.
///
/// Hypotheses without a direction contribute to the rotation only; the
/// direction is `None` when none of them has one.
pub fn fuse_hypotheses(
    hyps: &[PoseHypothesis],
    weights: &FusionWeights,
    mode: FusionMode,
) -> Result<(Rotation, Option<Vec3>)> {
    if hyps.is_empty() {
        return Err(AcrError::InsufficientData { needed: 1, got: 0 });
    }
    if hyps.len() != weights.len() {
        return Err(AcrError::InvalidInput(format!(
            "{} weights for {} hypotheses",
            weights.len(),
            hyps.len()
        )));
    }
    let w = weights.values();
    if hyps.len() == 1 || mode == FusionMode::WinnerTakeAll {
        let h = &hyps[argmax(w)];
        return Ok((h.rotation, h.direction));
    }
    let rotations: Vec<Rotation> = hyps.iter().map(|h| h.rotation).collect();
    let rotation = mean_rotation(&rotations, w);

    let with_dir: Vec<(Vec3, f64)> = hyps
        .iter()
        .zip(w)
        .filter_map(|(h, &wi)| h.direction.map(|d| (d, wi)))
        .collect();
    if with_dir.is_empty() {
        return Ok((rotation, None));
    }
    let lead = with_dir
        .iter()
        .fold(&with_dir[0], |best, x| if x.1 > best.1 { x } else { best })
        .0;
    let sum = with_dir.iter().fold(Vec3::zeros(), |acc, (d, wi)| {
        let sign = if d.dot(&lead) < 0.0 { -1.0 } else { 1.0 };
        acc + *d * (sign * wi)
    });
    if sum.norm() < 1e-9 {
        return Err(AcrError::AmbiguousDirection);
    }
    Ok((rotation, Some(sum.normalize())))
}

/// Weighted fusion of per-plane hypotheses into one directional pose.
pub fn fuse_poses(hyps: &[PoseHypothesis], weights: &FusionWeights) -> Result<DirectionalPose> {
    match fuse_hypotheses(hyps, weights, FusionMode::WeightedMean)? {
        (r, Some(d)) => DirectionalPose::new(r, d),
        (_, None) => Err(AcrError::AmbiguousDirection),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct I2peConfig {
    pub plane_match: PlaneMatchConfig,
    pub ransac: RansacConfig,
    /// Minimum correspondences inside a matched plane pair.
    pub min_plane_support: usize,
    pub fusion: FusionMode,
    /// Resolve each plane's two-fold decomposition ambiguity by agreement
    /// with the other planes.
    pub cross_plane_disambiguation: bool,
}

impl Default for I2peConfig {
    fn default() -> Self {
        I2peConfig {
            plane_match: PlaneMatchConfig::default(),
            ransac: RansacConfig::default(),
            min_plane_support: 4,
            fusion: FusionMode::WeightedMean,
            cross_plane_disambiguation: true,
        }
    }
}

/// Pose estimate of one matched plane pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaneEstimate {
    pub ref_plane: u16,
    pub cur_plane: u16,
    pub pairs: usize,
    pub hypothesis: PoseHypothesis,
    pub weight: f64,
}

/// Full output of the pose estimation chain.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct I2peReport {
    pub rotation: Rotation,
    /// `None` when every plane reports zero baseline.
    pub direction: Option<Vec3>,
    pub matching: PlaneMatching,
    pub planes: Vec<PlaneEstimate>,
    /// Plane pairs skipped, with the reason.
    pub skipped: Vec<(u16, u16, String)>,
    /// Indices of the input correspondences that support a plane homography.
    #[serde(skip)]
    pub inliers: Vec<usize>,
}

impl I2peReport {
    pub fn pose(&self) -> Result<DirectionalPose> {
        let d = self.direction.ok_or(AcrError::AmbiguousDirection)?;
        DirectionalPose::new(self.rotation, d)
    }

    pub fn is_zero_motion(&self) -> bool {
        self.direction.is_none()
    }

    pub fn unstable_translation(&self) -> bool {
        self.planes
            .iter()
            .any(|p| p.hypothesis.unstable_translation)
    }
}

/// Most candidate combinations examined when disambiguating across planes.
const MAX_COMBINATIONS: usize = 4096;

fn disagreement(a: &PoseHypothesis, b: &PoseHypothesis) -> f64 {
    let rot = rotation_error_deg(&a.rotation, &b.rotation);
    let dir = match (a.direction, b.direction) {
        (Some(x), Some(y)) => direction_angle(&x, &y).unwrap_or(0.0),
        _ => 0.0,
    };
    rot + dir
}

/// Picks one candidate per plane, minimizing weighted pairwise disagreement;
/// ties keep each plane's own best-first order.
fn choose_consistent(candidates: &[Vec<PoseHypothesis>], weights: &[f64]) -> Vec<usize> {
    let k = candidates.len();
    let total: usize = candidates.iter().map(Vec::len).product();
    if k < 2 || total > MAX_COMBINATIONS {
        return vec![0; k];
    }
    let mut best = vec![0; k];
    let mut best_cost = f64::INFINITY;
    let mut idx = vec![0; k];
    for _ in 0..total {
        let mut cost = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                cost += weights[i]
                    * weights[j]
                    * disagreement(&candidates[i][idx[i]], &candidates[j][idx[j]]);
            }
        }
        if best_cost.is_infinite() || cost < best_cost - 1e-9 * best_cost.max(1e-12) {
            best_cost = cost;
            best.clone_from(&idx);
        }
        for (i, slot) in idx.iter_mut().enumerate() {
            *slot += 1;
            if *slot < candidates[i].len() {
                break;
            }
            *slot = 0;
        }
    }
    best
}

/// Illumination-invariant relative pose of the current image with respect to
/// the reference image, returning the per-plane breakdown.
///
/// Only correspondences whose reference point lies in a matched reference
/// plane and whose current point lies in its partner plane are consulted.
pub fn i2pe_report(
    c: &CorrespondenceSet,
    m_ref: &PlaneSegmentMap,
    m_cur: &PlaneSegmentMap,
    intr: &Intrinsics,
    cfg: &I2peConfig,
) -> Result<I2peReport> {
    let radius = cfg.plane_match.erosion_radius;
    i2pe_prepared(
        c,
        &PreparedMask::new(m_ref, radius),
        &PreparedMask::new(m_cur, radius),
        intr,
        cfg,
    )
}

/// [`i2pe_report`] on masks that were already eroded and graphed.
pub fn i2pe_prepared(
    c: &CorrespondenceSet,
    p_ref: &PreparedMask,
    p_cur: &PreparedMask,
    intr: &Intrinsics,
    cfg: &I2peConfig,
) -> Result<I2peReport> {
    intr.validate()?;
    let (e_ref, e_cur) = (&p_ref.eroded, &p_cur.eroded);
    let matching = match_prepared(c, p_ref, p_cur, &cfg.plane_match)?;
    let image = e_ref.size();

    let labels: Vec<(u16, u16)> = c
        .iter()
        .map(|p| (e_ref.label_at(&p.a), e_cur.label_at(&p.b)))
        .collect();
    let mut skipped = Vec::new();
    let mut accepted: Vec<(u16, u16, usize, Vec<usize>, Vec<PoseHypothesis>)> = Vec::new();
    for (k, &(r, m, _)) in matching.pairs.iter().enumerate() {
        let idx: Vec<usize> = (0..c.len()).filter(|&i| labels[i] == (r, m)).collect();
        if idx.len() < cfg.min_plane_support.max(4) {
            skipped.push((r, m, format!("{} correspondences", idx.len())));
            continue;
        }
        let sub = c.subset(&idx);
        let ransac = cfg.ransac.with_seed(cfg.ransac.seed.wrapping_add(k as u64));
        let attempt = estimate_homography_ransac(&sub, &ransac).and_then(|(h, mask)| {
            let inliers: Vec<usize> = (0..sub.len()).filter(|&i| mask[i]).collect();
            let cands = decompose_homography_candidates(&h, intr, &sub.subset(&inliers), image)?;
            Ok((inliers.iter().map(|&i| idx[i]).collect::<Vec<_>>(), cands))
        });
        match attempt {
            Ok((inl, cands)) if !cands.is_empty() => accepted.push((r, m, idx.len(), inl, cands)),
            Ok(_) => skipped.push((r, m, AcrError::CheiralityFailure.kind().to_owned())),
            Err(e) => skipped.push((r, m, e.kind().to_owned())),
        }
    }
    if accepted.is_empty() {
        return Err(AcrError::EstimationFailure(
            "no plane pair yielded a pose".into(),
        ));
    }

    let raw: Vec<f64> = accepted
        .iter()
        .map(|a| hypothesis_weight(&a.4[0]))
        .collect();
    let weights = FusionWeights::new(&raw)?;
    let candidates: Vec<Vec<PoseHypothesis>> = accepted.iter().map(|a| a.4.clone()).collect();
    let mut inliers: Vec<usize> = accepted.iter().flat_map(|a| a.3.iter().copied()).collect();
    inliers.sort_unstable();
    let choice = if cfg.cross_plane_disambiguation {
        choose_consistent(&candidates, weights.values())
    } else {
        vec![0; candidates.len()]
    };
    let chosen: Vec<PoseHypothesis> = candidates
        .iter()
        .zip(&choice)
        .map(|(c, &i)| c[i].clone())
        .collect();
    let (rotation, direction) = fuse_hypotheses(&chosen, &weights, cfg.fusion)?;
    let planes = accepted
        .iter()
        .zip(chosen)
        .zip(weights.values())
        .map(|((a, hypothesis), &weight)| PlaneEstimate {
            ref_plane: a.0,
            cur_plane: a.1,
            pairs: a.2,
            hypothesis,
            weight,
        })
        .collect();
    Ok(I2peReport {
        rotation,
        direction,
        matching,
        planes,
        skipped,
        inliers,
    })
}

/// Illumination-invariant relative pose `x_cur = R x_ref + t` (unit `t`).
pub fn i2pe(
    c: &CorrespondenceSet,
    m_ref: &PlaneSegmentMap,
    m_cur: &PlaneSegmentMap,
    intr: &Intrinsics,
    cfg: &I2peConfig,
) -> Result<DirectionalPose> {
    i2pe_report(c, m_ref, m_cur, intr, cfg)?.pose()
}
