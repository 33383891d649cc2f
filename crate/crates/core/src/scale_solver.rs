//! Absolute translation scale and sparse depths from a homogeneous linear
//! system over the depths of matched points.
//!
//! For a pair `x_b = R x_a + S ṫ` every correspondence gives
//! `D^a_i a_i − D^b_i b_i + S c = 0` with `a_i = K⁻¹q^a_i`,
//! `b_i = R⁻¹K⁻¹q^b_i` and `c = R⁻¹ṫ`. The normal equations of each
//! correspondence form a 3×3 block; stacking them gives a 3N×(2N+1) system
//! whose nullspace holds the depths and the scale up to a common factor.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use crate::error::{AcrError, Result};
use crate::geometry::{DirectionalPose, Intrinsics, PixelPoint, Vec3};
use crate::pose_estimation::{CorrespondenceSet, TrackId};

/// Fewest correspondences accepted by the solvers.
pub const MIN_CORRESPONDENCES: usize = 8;

/// Two smallest singular values closer than this make the nullspace ambiguous.
pub const AMBIGUITY_GAP: f64 = 1e-8;

/// Quadratic and bilinear forms of one correspondence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBlock {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub zeta: f64,
}

impl CoefficientBlock {
    /// The symmetric 3×3 block acting on `(D^a, D^b, S)`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.alpha, -self.beta, self.gamma],
            [-self.beta, self.delta, -self.epsilon],
            [self.gamma, -self.epsilon, self.zeta],
        ]
    }
}

pub fn coefficient_block(
    qa: &PixelPoint,
    qb: &PixelPoint,
    intr: &Intrinsics,
    pose: &DirectionalPose,
) -> Result<CoefficientBlock> {
    intr.validate()?;
    let r_inv = pose.rotation.inverse();
    let a = intr.normalize(qa);
    let b = r_inv.apply(&intr.normalize(qb));
    let c = r_inv.apply(pose.direction());
    Ok(block_from_vectors(&a, &b, &c))
}

fn block_from_vectors(a: &Vec3, b: &Vec3, c: &Vec3) -> CoefficientBlock {
    CoefficientBlock {
        alpha: a.dot(a),
        beta: a.dot(b),
        gamma: a.dot(c),
        delta: b.dot(b),
        epsilon: b.dot(c),
        zeta: c.dot(c),
    }
}

/// Blocks for every pair of `c` under one relative pose.
pub fn coefficient_blocks(
    c: &CorrespondenceSet,
    intr: &Intrinsics,
    pose: &DirectionalPose,
) -> Result<Vec<CoefficientBlock>> {
    intr.validate()?;
    let r_inv = pose.rotation.inverse();
    let cv = r_inv.apply(pose.direction());
    Ok(c.iter()
        .map(|p| {
            let a = intr.normalize(&p.a);
            let b = r_inv.apply(&intr.normalize(&p.b));
            block_from_vectors(&a, &b, &cv)
        })
        .collect())
}

/// Dense 3N×(2N+1) system; block i occupies rows `3i..3i+3` and columns
/// `2i`, `2i+1` and the shared last column.
pub fn assemble_system(blocks: &[CoefficientBlock]) -> DMatrix<f64> {
    let n = blocks.len();
    let mut a = DMatrix::zeros(3 * n, 2 * n + 1);
    for (i, b) in blocks.iter().enumerate() {
        let m = b.matrix();
        for r in 0..3 {
            a[(3 * i + r, 2 * i)] = m[r][0];
            a[(3 * i + r, 2 * i + 1)] = m[r][1];
            a[(3 * i + r, 2 * n)] = m[r][2];
        }
    }
    a
}

/// The convex objective `F(y) = ½ Σ_i ‖D^a_i a_i − D^b_i b_i + S c‖²`,
/// whose gradient is `A y`.
pub fn objective(blocks: &[CoefficientBlock], y: &DVector<f64>) -> f64 {
    let n = blocks.len();
    let s = y[2 * n];
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let m = b.matrix();
            let v = [y[2 * i], y[2 * i + 1], s];
            (0..3)
                .map(|r| v[r] * (0..3).map(|k| m[r][k] * v[k]).sum::<f64>())
                .sum::<f64>()
                / 2.0
        })
        .sum()
}

/// Unit-norm nullspace vector `y = (d^a_1, d^b_1, …, d^a_N, d^b_N, s)` with
/// `s > 0`. Only ratios between entries carry meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSolution {
    pub y: DVector<f64>,
    /// `‖A y‖`.
    pub residual: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl ScaleSolution {
    pub fn len(&self) -> usize {
        (self.y.len() - 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth_a(&self, i: usize) -> f64 {
        self.y[2 * i]
    }

    pub fn depth_b(&self, i: usize) -> f64 {
        self.y[2 * i + 1]
    }

    pub fn scale(&self) -> f64 {
        self.y[self.y.len() - 1]
    }

    fn normalized(mut y: DVector<f64>, residual: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        if sigma2 - sigma1 <= AMBIGUITY_GAP {
            return Err(AcrError::AmbiguousNullspace { sigma1, sigma2 });
        }
        let norm = y.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(AcrError::DegenerateModel("zero nullspace vector".into()));
        }
        y /= norm;
        let last = y.len() - 1;
        if y[last] < 0.0 {
            y = -y;
        }
        if y[last] <= 0.0 || y.iter().take(last).any(|&d| d <= 0.0) {
            return Err(AcrError::CheiralityFailure);
        }
        Ok(ScaleSolution {
            y,
            residual,
            sigma1,
            sigma2,
        })
    }
}

/// Right singular vector of the smallest singular value of `A`. Systems with
/// the layout of [`assemble_system`] go through [`solve_blocks`]; any other
/// matrix through the dense SVD.
pub fn solve_nullspace(a: &DMatrix<f64>) -> Result<ScaleSolution> {
    check_shape(a)?;
    match blocks_of_system(a) {
        Some(blocks) => solve_blocks(&blocks),
        None => solve_nullspace_dense(a),
    }
}

fn check_shape(a: &DMatrix<f64>) -> Result<()> {
    let cols = a.ncols();
    if cols < 3 || cols % 2 == 0 || a.nrows() != 3 * (cols - 1) / 2 {
        return Err(AcrError::InvalidInput(format!(
            "expected a 3N×(2N+1) system, got {}×{cols}",
            a.nrows()
        )));
    }
    Ok(())
}

/// Recovers the coefficient blocks of a system laid out by
/// [`assemble_system`]; `None` when any entry breaks that layout.
fn blocks_of_system(a: &DMatrix<f64>) -> Option<Vec<CoefficientBlock>> {
    let n = (a.ncols() - 1) / 2;
    let blocks: Vec<CoefficientBlock> = (0..n)
        .map(|i| CoefficientBlock {
            alpha: a[(3 * i, 2 * i)],
            beta: -a[(3 * i, 2 * i + 1)],
            gamma: a[(3 * i, 2 * n)],
            delta: a[(3 * i + 1, 2 * i + 1)],
            epsilon: -a[(3 * i + 1, 2 * n)],
            zeta: a[(3 * i + 2, 2 * n)],
        })
        .collect();
    let mats: Vec<_> = blocks.iter().map(CoefficientBlock::matrix).collect();
    for j in 0..=2 * n {
        let col = a.column(j);
        for (row, &v) in col.iter().enumerate() {
            let (i, r) = (row / 3, row % 3);
            let want = if j == 2 * n {
                mats[i][r][2]
            } else if j / 2 == i {
                mats[i][r][j % 2]
            } else {
                0.0
            };
            if v != want {
                return None;
            }
        }
    }
    Some(blocks)
}

/// Dense SVD route of [`solve_nullspace`], for arbitrary matrices.
pub fn solve_nullspace_dense(a: &DMatrix<f64>) -> Result<ScaleSolution> {
    check_shape(a)?;
    let cols = a.ncols();
    let n = (cols - 1) / 2;
    if n < MIN_CORRESPONDENCES {
        return Err(AcrError::InsufficientData {
            needed: MIN_CORRESPONDENCES,
            got: n,
        });
    }
    let svd = a.clone().svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| AcrError::DegenerateModel("svd failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (s1, s2) = (svd.singular_values[order[0]], svd.singular_values[order[1]]);
    let y: DVector<f64> = vt.row(order[0]).transpose();
    let residual = (a * &y).norm() / y.norm();
    ScaleSolution::normalized(y, residual, s1, s2)
}

/// Same nullspace as [`solve_nullspace`] but exploiting the block structure:
/// `AᵀA` is an arrowhead matrix whose smallest eigenpairs follow from a
/// secular equation in O(N).
pub fn solve_blocks(blocks: &[CoefficientBlock]) -> Result<ScaleSolution> {
    let n = blocks.len();
    if n < MIN_CORRESPONDENCES {
        return Err(AcrError::InsufficientData {
            needed: MIN_CORRESPONDENCES,
            got: n,
        });
    }
    // Per block, G² split into the 2×2 depth part B, the coupling column c
    // and the scale-scale entry.
    let mut bmat = Vec::with_capacity(n);
    let mut coupling = Vec::with_capacity(n);
    let mut corner = 0.0;
    let mut scale_norm: f64 = 0.0;
    for b in blocks {
        let g = b.matrix();
        let g2 = |i: usize, j: usize| (0..3).map(|k| g[i][k] * g[k][j]).sum::<f64>();
        bmat.push([g2(0, 0), g2(0, 1), g2(1, 1)]);
        coupling.push([g2(0, 2), g2(1, 2)]);
        corner += g2(2, 2);
        scale_norm = scale_norm.max(g2(0, 0) + g2(1, 1) + g2(2, 2));
    }

    // Poles (eigenvalues of each B) and squared weights of the coupling in the
    // eigenbasis.
    let mut poles: Vec<(f64, f64)> = Vec::with_capacity(2 * n);
    for (b, c) in bmat.iter().zip(&coupling) {
        let [(l1, v1), (l2, v2)] = sym2_eigen(b[0], b[1], b[2]);
        poles.push((l1, (v1[0] * c[0] + v1[1] * c[1]).powi(2)));
        poles.push((l2, (v2[0] * c[0] + v2[1] * c[1]).powi(2)));
    }
    let tiny = f64::EPSILON * f64::EPSILON * scale_norm.max(1.0) * corner.max(1.0);
    let mut extra_eigs = Vec::new();
    let mut active: Vec<(f64, f64)> = Vec::new();
    for &(p, w) in &poles {
        if w <= tiny {
            extra_eigs.push(p);
        } else {
            active.push((p, w));
        }
    }
    active.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Coincident poles: all but one copy are eigenvalues of AᵀA.
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(active.len());
    for (p, w) in active {
        match merged.last_mut() {
            Some(last) if (p - last.0).abs() <= 4.0 * f64::EPSILON * p.abs().max(last.0.abs()) => {
                last.1 += w;
                extra_eigs.push(p);
            }
            _ => merged.push((p, w)),
        }
    }
    let secular = |lambda: f64| -> f64 {
        corner - lambda - merged.iter().map(|(p, w)| w / (p - lambda)).sum::<f64>()
    };

    let upper0 = merged.first().map_or(f64::INFINITY, |m| m.0);
    let root0 = secular_root_below(&secular, upper0, corner);
    let root1 = if merged.len() >= 2 {
        Some(bisect_decreasing(&secular, merged[0].0, merged[1].0))
    } else if merged.len() == 1 {
        Some(secular_root_above(&secular, merged[0].0, corner))
    } else {
        None
    };
    let mut others: Vec<f64> = extra_eigs;
    others.extend(root1);
    others.sort_by(|a, b| a.total_cmp(b));

    let sv = |l: f64| l.max(0.0).sqrt();
    let lambda = root0;
    let mut all = others.clone();
    all.push(lambda);
    all.sort_by(|a, b| a.total_cmp(b));
    let (sigma1, sigma2) = (sv(all[0]), all.get(1).map_or(f64::INFINITY, |&l| sv(l)));
    if sigma2 - sigma1 <= AMBIGUITY_GAP {
        return Err(AcrError::AmbiguousNullspace { sigma1, sigma2 });
    }
    if others.first().is_some_and(|&o| o < lambda) {
        // The smallest eigenvector does not involve the scale at all.
        return Err(AcrError::CheiralityFailure);
    }

    let mut y = DVector::zeros(2 * n + 1);
    for (i, (b, c)) in bmat.iter().zip(&coupling).enumerate() {
        let (p, q, r) = (b[0] - lambda, b[1], b[2] - lambda);
        let det = p * r - q * q;
        // (B − λ) u = −c
        y[2 * i] = -(r * c[0] - q * c[1]) / det;
        y[2 * i + 1] = -(p * c[1] - q * c[0]) / det;
    }
    y[2 * n] = 1.0;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(AcrError::DegenerateModel("singular depth block".into()));
    }
    if let Some(refined) = refine_on_r_factor(blocks, &y) {
        y = refined;
    }
    let residual = block_residual(blocks, &y) / y.norm();
    ScaleSolution::normalized(y, residual, sigma1, sigma2)
}

/// Block QR of `A`: per block the 2×2 factor of its depth columns and the
/// projection of its scale column, plus the final scale pivot.
struct RFactor {
    blocks: Vec<(Matrix2<f64>, Vector2<f64>)>,
    pivot: f64,
}

impl RFactor {
    fn new(blocks: &[CoefficientBlock]) -> Self {
        let mut out = Vec::with_capacity(blocks.len());
        let mut rest = 0.0;
        for b in blocks {
            let m = Matrix3::from(b.matrix());
            let depth: Matrix3x2<f64> = m.fixed_columns::<2>(0).into_owned();
            let scale: Vector3<f64> = m.column(2).into_owned();
            let qr = depth.qr();
            let q = qr.q();
            let u = q.transpose() * scale;
            rest += (scale - q * u).norm_squared();
            out.push((qr.r(), u));
        }
        RFactor {
            blocks: out,
            pivot: rest.sqrt(),
        }
    }

    /// `(RᵀR)⁻¹ y`, or `None` when a pivot vanishes.
    fn inverse_normal(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.blocks.len();
        let mut z = DVector::zeros(2 * n + 1);
        let mut acc = y[2 * n];
        for (i, (r, u)) in self.blocks.iter().enumerate() {
            let zi = r.transpose().solve_lower_triangular(&Vector2::new(y[2 * i], y[2 * i + 1]))?;
            z[2 * i] = zi[0];
            z[2 * i + 1] = zi[1];
            acc -= u.dot(&zi);
        }
        let pivot = self.pivot.max(f64::MIN_POSITIVE.sqrt());
        let xs = acc / pivot / pivot;
        let mut x = DVector::zeros(2 * n + 1);
        x[2 * n] = xs;
        for (i, (r, u)) in self.blocks.iter().enumerate() {
            let rhs = Vector2::new(z[2 * i], z[2 * i + 1]) - u * xs;
            let xi = r.solve_upper_triangular(&rhs)?;
            x[2 * i] = xi[0];
            x[2 * i + 1] = xi[1];
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

/// Inverse iteration on the R factor of `A`, which avoids the squared
/// conditioning of the `AᵀA` eigenvector.
fn refine_on_r_factor(blocks: &[CoefficientBlock], y: &DVector<f64>) -> Option<DVector<f64>> {
    let r = RFactor::new(blocks);
    let mut x = y / y.norm();
    for _ in 0..2 {
        x = r.inverse_normal(&x)?;
        let norm = x.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return None;
        }
        x /= norm;
    }
    Some(x)
}

/// `‖A y‖` without forming `A`.
fn block_residual(blocks: &[CoefficientBlock], y: &DVector<f64>) -> f64 {
    let n = blocks.len();
    let s = y[2 * n];
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let m = b.matrix();
            let v = [y[2 * i], y[2 * i + 1], s];
            (0..3)
                .map(|r| (0..3).map(|k| m[r][k] * v[k]).sum::<f64>().powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Eigenpairs of `[[p, q], [q, r]]`, ascending.
fn sym2_eigen(p: f64, q: f64, r: f64) -> [(f64, [f64; 2]); 2] {
    let m = (p + r) / 2.0;
    let d = ((p - r) / 2.0).hypot(q);
    let hi = m + d;
    let lo = if hi != 0.0 {
        (p * r - q * q) / hi
    } else {
        m - d
    };
    // Eigenvector of the larger eigenvalue from the better-conditioned row.
    let (x, yv) = if (hi - p).abs() + q.abs() >= (hi - r).abs() + q.abs() {
        (q, hi - p)
    } else {
        (hi - r, q)
    };
    let norm = x.hypot(yv);
    let v_hi = if norm > 0.0 {
        [x / norm, yv / norm]
    } else {
        [1.0, 0.0]
    };
    let v_lo = [-v_hi[1], v_hi[0]];
    [(lo, v_lo), (hi, v_hi)]
}

/// Root of a function decreasing from +∞ to −∞ on `(lo, hi)`.
fn bisect_decreasing(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + (hi - lo) / 2.0
}

fn secular_root_below(f: &dyn Fn(f64) -> f64, upper: f64, corner: f64) -> f64 {
    let hi = if upper.is_finite() { upper } else { corner };
    let mut step = hi.abs().max(corner.abs()).max(1.0);
    let mut lo = hi.min(0.0) - step;
    while f(lo) <= 0.0 {
        step *= 2.0;
        lo = hi.min(0.0) - step;
    }
    if upper.is_finite() {
        bisect_decreasing(f, lo, hi)
    } else {
        let mut top = hi + step;
        while f(top) > 0.0 {
            top += step;
        }
        bisect_decreasing(f, lo, top)
    }
}

fn secular_root_above(f: &dyn Fn(f64) -> f64, pole: f64, corner: f64) -> f64 {
    let mut step = pole.abs().max(corner.abs()).max(1.0);
    let mut hi = pole + step;
    while f(hi) > 0.0 {
        step *= 2.0;
        hi = pole + step;
    }
    bisect_decreasing(f, pole, hi)
}

/// Metric scale of the initialization pair: the executed hand translation is
/// a rigid motion, so its norm equals the camera translation norm regardless
/// of the hand-eye pose, and the estimated direction has unit norm.
pub fn init_scale(executed_translation: &Vec3, estimated: &DirectionalPose) -> Result<f64> {
    let t = executed_translation.norm();
    if t == 0.0 || !t.is_finite() {
        return Err(AcrError::DegenerateInit);
    }
    Ok(t / estimated.direction().norm())
}

/// Metric depths keyed by track id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparseDepthMap {
    pub depths: BTreeMap<TrackId, f64>,
}

impl SparseDepthMap {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn get(&self, track: TrackId) -> Option<f64> {
        self.depths.get(&track).copied()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AcrError::MissingInput(format!("{}: {e}", path.display())))?;
        let map: SparseDepthMap = serde_json::from_str(&text)?;
        if map.depths.values().any(|&d| !(d > 0.0)) {
            return Err(AcrError::InvalidInput("depths must be positive".into()));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn check_tracks(solution: &ScaleSolution, tracks: &[TrackId]) -> Result<()> {
    if tracks.len() != solution.len() {
        return Err(AcrError::InvalidInput(format!(
            "{} track ids for {} solved correspondences",
            tracks.len(),
            solution.len()
        )));
    }
    Ok(())
}

/// Metric depths of the A-side image of the initialization pair:
/// `D_j = d^a_j · S_init / s`.
pub fn depth_map_current(
    solution: &ScaleSolution,
    tracks: &[TrackId],
    s_init: f64,
) -> Result<SparseDepthMap> {
    check_tracks(solution, tracks)?;
    let factor = s_init / solution.scale();
    let mut depths = BTreeMap::new();
    for (i, &t) in tracks.iter().enumerate() {
        let d = solution.depth_a(i) * factor;
        if !(d > 0.0) {
            return Err(AcrError::CheiralityFailure);
        }
        depths.insert(t, d);
    }
    Ok(SparseDepthMap { depths })
}

/// Metric depths of the reference image, transferred from the B-side depths
/// `d0` through the ratios of a (reference, current) solution:
/// `D^ref_l = D⁰_l · d^a_l / d^b_l`.
pub fn depth_map_reference(
    ref_solution: &ScaleSolution,
    tracks: &[TrackId],
    d0: &SparseDepthMap,
) -> Result<SparseDepthMap> {
    check_tracks(ref_solution, tracks)?;
    let mut depths = BTreeMap::new();
    for (i, &t) in tracks.iter().enumerate() {
        let known = d0.get(t).ok_or(AcrError::MissingDepth(t))?;
        let d = known * ref_solution.depth_a(i) / ref_solution.depth_b(i);
        if !(d > 0.0) {
            return Err(AcrError::CheiralityFailure);
        }
        depths.insert(t, d);
    }
    Ok(SparseDepthMap { depths })
}

/// How per-track scale estimates are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum ScaleAggregate {
    #[default]
    Mean,
    Median,
}

/// Metric scale of a (reference, current) solution from reference depths:
/// the mean (or median) of `s · D^ref_p / d^a_p` over the shared tracks.
/// Tracks absent from `dref` are skipped.
pub fn iteration_scale(
    iter_solution: &ScaleSolution,
    tracks: &[TrackId],
    dref: &SparseDepthMap,
    aggregate: ScaleAggregate,
) -> Result<f64> {
    check_tracks(iter_solution, tracks)?;
    let s = iter_solution.scale();
    let mut values: Vec<f64> = tracks
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| dref.get(t).map(|d| s * d / iter_solution.depth_a(i)))
        .collect();
    if values.is_empty() {
        return Err(AcrError::MissingDepth(tracks.first().copied().unwrap_or(0)));
    }
    Ok(match aggregate {
        ScaleAggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
        ScaleAggregate::Median => {
            values.sort_by(|a, b| a.total_cmp(b));
            let m = values.len() / 2;
            if values.len() % 2 == 1 {
                values[m]
            } else {
                (values[m - 1] + values[m]) / 2.0
            }
        }
    })
}
