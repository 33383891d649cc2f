//! Minimal essential-matrix solver for five calibrated correspondences.
//!
//! The essential matrix is sought in the four-dimensional nullspace of the
//! epipolar constraints, `E = xX + yY + zZ + W`. The ten cubic constraints
//! (`det E = 0` and the trace constraint) are reduced by Gauss-Jordan
//! elimination, and the solutions are read off the eigenvectors of the action
//! matrix for multiplication by `x`.

use nalgebra::{DMatrix, SMatrix, SVector};

use crate::geometry::{Mat3, Vec3};

/// Number of monomials of degree ≤ 3 in x, y, z.
const NMON: usize = 20;

/// Exponents of the monomials in elimination order: the ten cubics first, then
/// the quotient-ring basis `[x², xy, y², xz, yz, z², x, y, z, 1]`.
const MONOMIALS: [(u8, u8, u8); NMON] = [
    (3, 0, 0),
    (2, 1, 0),
    (1, 2, 0),
    (0, 3, 0),
    (2, 0, 1),
    (1, 1, 1),
    (0, 2, 1),
    (1, 0, 2),
    (0, 1, 2),
    (0, 0, 3),
    (2, 0, 0),
    (1, 1, 0),
    (0, 2, 0),
    (1, 0, 1),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

fn monomial_index(e: (u8, u8, u8)) -> usize {
    MONOMIALS
        .iter()
        .position(|&m| m == e)
        .expect("degree at most three")
}

/// Product table: `PRODUCT[i][j]` is the index of monomial i times monomial j,
/// or `usize::MAX` when the degree exceeds three.
fn product_table() -> &'static [[usize; NMON]; NMON] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[[usize; NMON]; NMON]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[usize::MAX; NMON]; NMON];
        for (i, a) in MONOMIALS.iter().enumerate() {
            for (j, b) in MONOMIALS.iter().enumerate() {
                let e = (a.0 + b.0, a.1 + b.1, a.2 + b.2);
                if e.0 + e.1 + e.2 <= 3 {
                    t[i][j] = monomial_index(e);
                }
            }
        }
        t
    })
}

#[derive(Clone, Copy)]
struct Poly([f64; NMON]);

impl Poly {
    fn zero() -> Self {
        Poly([0.0; NMON])
    }

    fn mul(&self, other: &Poly) -> Poly {
        let table = product_table();
        let mut out = Poly::zero();
        for (i, &a) in self.0.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in other.0.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let k = table[i][j];
                debug_assert!(k != usize::MAX, "degree overflow");
                out.0[k] += a * b;
            }
        }
        out
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut out = *self;
        for (o, b) in out.0.iter_mut().zip(other.0.iter()) {
            *o += b;
        }
        out
    }

    fn scale(&self, s: f64) -> Poly {
        let mut out = *self;
        out.0.iter_mut().for_each(|v| *v *= s);
        out
    }
}

type PolyMat = [[Poly; 3]; 3];

fn poly_matmul(a: &PolyMat, b: &PolyMat) -> PolyMat {
    let mut out = [[Poly::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = Poly::zero();
            for k in 0..3 {
                acc = acc.add(&a[i][k].mul(&b[k][j]));
            }
            out[i][j] = acc;
        }
    }
    out
}

fn poly_transpose(a: &PolyMat) -> PolyMat {
    let mut out = [[Poly::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Row of the epipolar constraint `x_bᵀ E x_a = 0` for row-major `E`.
pub(crate) fn epipolar_row(xa: &Vec3, xb: &Vec3) -> [f64; 9] {
    [
        xb.x * xa.x,
        xb.x * xa.y,
        xb.x * xa.z,
        xb.y * xa.x,
        xb.y * xa.y,
        xb.y * xa.z,
        xb.z * xa.x,
        xb.z * xa.y,
        xb.z * xa.z,
    ]
}

/// Essential matrices consistent with the four nullspace basis matrices.
pub(crate) fn solve_from_basis(basis: &[[f64; 9]; 4]) -> Vec<Mat3> {
    let [bx, by, bz, bw] = basis;
    let ix = monomial_index((1, 0, 0));
    let iy = monomial_index((0, 1, 0));
    let iz = monomial_index((0, 0, 1));
    let i1 = monomial_index((0, 0, 0));
    let mut e: PolyMat = [[Poly::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let k = 3 * r + c;
            let mut p = Poly::zero();
            p.0[ix] = bx[k];
            p.0[iy] = by[k];
            p.0[iz] = bz[k];
            p.0[i1] = bw[k];
            e[r][c] = p;
        }
    }

    let mut rows: Vec<Poly> = Vec::with_capacity(10);
    let det = e[0][0]
        .mul(
            &e[1][1]
                .mul(&e[2][2])
                .add(&e[1][2].mul(&e[2][1]).scale(-1.0)),
        )
        .add(
            &e[0][1].mul(
                &e[1][2]
                    .mul(&e[2][0])
                    .add(&e[1][0].mul(&e[2][2]).scale(-1.0)),
            ),
        )
        .add(
            &e[0][2].mul(
                &e[1][0]
                    .mul(&e[2][1])
                    .add(&e[1][1].mul(&e[2][0]).scale(-1.0)),
            ),
        );
    rows.push(det);
    let eet = poly_matmul(&e, &poly_transpose(&e));
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    let eete = poly_matmul(&eet, &e);
    for r in 0..3 {
        for c in 0..3 {
            rows.push(eete[r][c].scale(2.0).add(&trace.mul(&e[r][c]).scale(-1.0)));
        }
    }

    let mut m = SMatrix::<f64, 10, NMON>::zeros();
    for (r, p) in rows.iter().enumerate() {
        for c in 0..NMON {
            m[(r, c)] = p.0[c];
        }
    }
    let Some(b) = eliminate(&mut m) else {
        return Vec::new();
    };

    // Action matrix of multiplication by x on the basis monomials.
    let mut action = SMatrix::<f64, 10, 10>::zeros();
    for (row, cubic) in [(0, 0), (1, 1), (2, 2), (3, 4), (4, 5), (5, 7)] {
        for c in 0..10 {
            action[(row, c)] = -b[(cubic, c)];
        }
    }
    action[(6, 0)] = 1.0;
    action[(7, 1)] = 1.0;
    action[(8, 3)] = 1.0;
    action[(9, 6)] = 1.0;

    let eig = action.complex_eigenvalues();
    let mut out = Vec::new();
    for lambda in eig.iter() {
        if lambda.im.abs() > 1e-8 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let Some(v) = eigenvector(&action, lambda.re) else {
            continue;
        };
        if v[9].abs() < 1e-12 {
            continue;
        }
        let (x, y, z) = (v[6] / v[9], v[7] / v[9], v[8] / v[9]);
        let mut em = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                let k = 3 * r + c;
                em[(r, c)] = x * bx[k] + y * by[k] + z * bz[k] + bw[k];
            }
        }
        let norm = em.norm();
        if norm > 0.0 && norm.is_finite() {
            out.push(em / norm);
        }
    }
    out
}

/// Gauss-Jordan elimination of the first ten columns with partial pivoting;
/// returns the reduced right block.
fn eliminate(m: &mut SMatrix<f64, 10, NMON>) -> Option<SMatrix<f64, 10, 10>> {
    for col in 0..10 {
        let (pivot, max) = (col..10)
            .map(|r| (r, m[(r, col)].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        if max < 1e-14 {
            return None;
        }
        m.swap_rows(col, pivot);
        let p = m[(col, col)];
        for c in 0..NMON {
            m[(col, c)] /= p;
        }
        for r in 0..10 {
            if r != col {
                let f = m[(r, col)];
                if f != 0.0 {
                    for c in 0..NMON {
                        m[(r, c)] -= f * m[(col, c)];
                    }
                }
            }
        }
    }
    Some(m.fixed_view::<10, 10>(0, 10).into_owned())
}

/// Eigenvector of `a` for the real eigenvalue `lambda`, normalized so its last
/// entry (the constant monomial) is one.
fn eigenvector(a: &SMatrix<f64, 10, 10>, lambda: f64) -> Option<SVector<f64, 10>> {
    let c = a - SMatrix::<f64, 10, 10>::identity() * lambda;
    // The last row states v₆ = λ v₉; fix v₉ = 1 and solve the remaining rows.
    let lhs = c.fixed_view::<9, 9>(0, 0).into_owned();
    let rhs = -c.fixed_view::<9, 1>(0, 9).into_owned();
    if let Some(sol) = lhs.lu().solve(&rhs) {
        if sol.iter().all(|v| v.is_finite()) {
            let mut v = SVector::<f64, 10>::zeros();
            v.fixed_rows_mut::<9>(0).copy_from(&sol);
            v[9] = 1.0;
            return Some(v);
        }
    }
    let svd = c.svd(false, true);
    let vt = svd.v_t?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v: SVector<f64, 10> = vt.row(idx).transpose();
    Some(v / v[9])
}

/// Right singular vectors of the four smallest singular values of the
/// stacked constraint rows, the smallest last so that it takes the role of the
/// constant term `W`.
pub(crate) fn nullspace4(rows: &[[f64; 9]]) -> Option<[[f64; 9]; 4]> {
    let n = rows.len().max(9);
    let mut m = DMatrix::<f64>::zeros(n, 9);
    for (r, row) in rows.iter().enumerate() {
        for c in 0..9 {
            m[(r, c)] = row[c];
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let mut out = [[0.0; 9]; 4];
    for (k, &idx) in order.iter().take(4).enumerate() {
        for c in 0..9 {
            out[3 - k][c] = vt[(idx, c)];
        }
    }
    Some(out)
}

/// Essential matrices for at least five calibrated pairs (bearing vectors with
/// unit last component). With more than five pairs the four-dimensional
/// least-squares nullspace is used.
pub fn five_point(xa: &[Vec3], xb: &[Vec3]) -> Vec<Mat3> {
    if xa.len() < 5 || xa.len() != xb.len() {
        return Vec::new();
    }
    let rows: Vec<[f64; 9]> = xa.iter().zip(xb).map(|(a, b)| epipolar_row(a, b)).collect();
    match nullspace4(&rows) {
        Some(basis) => solve_from_basis(&basis),
        None => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn essential(r: &Mat3, t: &Vec3) -> Mat3 {
        let tx = Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
        let e = tx * r;
        e / e.norm()
    }

    fn closest(cands: &[Mat3], truth: &Mat3) -> f64 {
        cands
            .iter()
            .map(|e| (e - truth).norm().min((e + truth).norm()))
            .fold(f64::INFINITY, f64::min)
    }

    fn random_pairs(
        rng: &mut ChaCha8Rng,
        r: &Mat3,
        t: &Vec3,
        n: usize,
        planar: bool,
    ) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut xa = Vec::new();
        let mut xb = Vec::new();
        while xa.len() < n {
            let p = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                if planar { 4.0 } else { rng.gen_range(2.0..6.0) },
            );
            let q = r * p + t;
            if q.z <= 0.1 {
                continue;
            }
            xa.push(p / p.z);
            xb.push(q / q.z);
        }
        (xa, xb)
    }

    #[test]
    fn recovers_true_essential_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let r = *Rotation::from_scaled_axis(&Vec3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ))
            .matrix();
            let t = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let (xa, xb) = random_pairs(&mut rng, &r, &t, 5, false);
            let cands = five_point(&xa, &xb);
            assert!(cands.len() <= 10);
            assert!(closest(&cands, &essential(&r, &t)) < 1e-6);
            for e in &cands {
                for (a, b) in xa.iter().zip(&xb) {
                    assert!((b.transpose() * e * a)[0].abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn planar_scenes_still_contain_the_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let r = *Rotation::rz_deg(rng.gen_range(-8.0..8.0)).matrix();
            let t = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.1);
            let (xa, xb) = random_pairs(&mut rng, &r, &t, 5, true);
            let cands = five_point(&xa, &xb);
            assert!(closest(&cands, &essential(&r, &t)) < 1e-6);
        }
    }

    #[test]
    fn overdetermined_noiseless_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = *Rotation::ry_deg(10.0).matrix();
        let t = Vec3::new(0.3, -0.1, 0.05);
        let (xa, xb) = random_pairs(&mut rng, &r, &t, 40, false);
        let cands = five_point(&xa, &xb);
        assert!(closest(&cands, &essential(&r, &t)) < 1e-8);
    }

    #[test]
    fn too_few_pairs() {
        assert!(five_point(&[Vec3::z(); 4], &[Vec3::z(); 4]).is_empty());
    }
}
