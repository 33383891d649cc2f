//! Plane-region masks and the graph matching that pairs plane regions across
//! two images.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use crate::error::{AcrError, Result};
use crate::geometry::{ImageSize, PixelPoint};
use crate::pose_estimation::CorrespondenceSet;

/// Per-pixel plane labels: 0 is background, planes are numbered `1..=H`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaneSegmentMap {
    width: u32,
    height: u32,
    labels: Vec<u16>,
    planes: u16,
}

impl PlaneSegmentMap {
    /// Validates that the labels are exactly `1..=H` (plus background).
    pub fn new(width: u32, height: u32, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(AcrError::InvalidInput(format!(
                "{} labels for a {width}×{height} map",
                labels.len()
            )));
        }
        let planes = labels.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; planes as usize + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=planes as usize).find(|&k| !seen[k]) {
            return Err(AcrError::InvalidInput(format!(
                "plane ids are not contiguous: {missing} is missing"
            )));
        }
        Ok(PlaneSegmentMap {
            width,
            height,
            labels,
            planes,
        })
    }

    /// Renumbers arbitrary labels to `1..=H`, keeping their relative order.
    /// Returns the map and, for each new id, the original label.
    pub fn compacted(width: u32, height: u32, mut labels: Vec<u16>) -> Result<(Self, Vec<u16>)> {
        let mut present = vec![false; u16::MAX as usize + 1];
        for &l in &labels {
            present[l as usize] = true;
        }
        let mut remap = vec![0u16; u16::MAX as usize + 1];
        let mut originals = Vec::new();
        for (l, &p) in present.iter().enumerate().skip(1) {
            if p {
                originals.push(l as u16);
                remap[l] = originals.len() as u16;
            }
        }
        for l in labels.iter_mut() {
            *l = remap[*l as usize];
        }
        Ok((Self::new(width, height, labels)?, originals))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Number of planes `H`.
    pub fn num_planes(&self) -> usize {
        self.planes as usize
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    /// Label of the raster cell containing `p`; 0 outside the image.
    pub fn label_at(&self, p: &PixelPoint) -> u16 {
        if !(p.u >= 0.0 && p.v >= 0.0) {
            return 0;
        }
        let (x, y) = (p.u.floor(), p.v.floor());
        if x >= self.width as f64 || y >= self.height as f64 {
            return 0;
        }
        self.get(x as u32, y as u32)
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.planes as usize + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    fn check_plane(&self, id: u16) -> Result<()> {
        if id == 0 || id > self.planes {
            Err(AcrError::MissingPlane(id as u32))
        } else {
            Ok(())
        }
    }

    /// Writes a binary 16-bit PGM (P5, maxval 65535).
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.labels.len() * 2);
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a binary PGM with maxval up to 65535; pixel values are labels.
    pub fn read_pgm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(AcrError::Pgm("truncated header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_owned));
        }
        if header.len() > 4 {
            return Err(AcrError::Pgm("unexpected data after maxval".into()));
        }
        if header[0] != "P5" {
            return Err(AcrError::Pgm(format!("magic {:?} is not P5", header[0])));
        }
        let parse = |s: &str| -> Result<u32> {
            s.parse()
                .map_err(|_| AcrError::Pgm(format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(AcrError::Pgm(format!("maxval {maxval} out of range")));
        }
        let n = width as usize * height as usize;
        let labels = if maxval < 256 {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| AcrError::Pgm("truncated raster".into()))?;
            buf.into_iter().map(u16::from).collect()
        } else {
            let mut buf = vec![0u8; 2 * n];
            r.read_exact(&mut buf)
                .map_err(|_| AcrError::Pgm("truncated raster".into()))?;
            buf.chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect()
        };
        Self::new(width, height, labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| AcrError::MissingInput(format!("{}: {e}", path.display())))?;
        Self::read_pgm(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))
    }
}

/// Offsets of a disk of the given radius.
fn disk_offsets(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f64 <= r2 {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Erodes every plane region by a disk: a pixel keeps its label only if no
/// pixel of another label (or outside the image) lies within `radius`.
/// Regions that vanish are dropped and the remaining ids recompacted.
pub fn erode_mask(m: &PlaneSegmentMap, radius: f64) -> PlaneSegmentMap {
    if !(radius >= 1.0) {
        return m.clone();
    }
    let (w, h) = (m.width as usize, m.height as usize);
    let orig = &m.labels;
    let mut out = orig.clone();
    let disk = disk_offsets(radius);
    // Label of the in-image foreign pixel a disk was last stamped at for.
    let mut stamped = vec![0u16; w * h];
    // The nearest foreign pixel to any region pixel is 4-adjacent to the
    // region, so stamping disks at those positions is exact.
    let mut stamp = |qx: i64, qy: i64, k: u16| {
        let inside = qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h;
        if inside {
            let q = qy as usize * w + qx as usize;
            if stamped[q] == k {
                return;
            }
            stamped[q] = k;
        }
        for &(dx, dy) in &disk {
            let (x, y) = (qx + dx, qy + dy);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                let i = y as usize * w + x as usize;
                if orig[i] == k {
                    out[i] = 0;
                }
            }
        }
    };
    for y in 0..h {
        let row = &orig[y * w..(y + 1) * w];
        for x in 0..w {
            let k = row[x];
            if k == 0 {
                continue;
            }
            let left = x > 0 && row[x - 1] == k;
            let right = x + 1 < w && row[x + 1] == k;
            let up = y > 0 && orig[(y - 1) * w + x] == k;
            let down = y + 1 < h && orig[(y + 1) * w + x] == k;
            if left && right && up && down {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            if !left {
                stamp(xi - 1, yi, k);
            }
            if !right {
                stamp(xi + 1, yi, k);
            }
            if !up {
                stamp(xi, yi - 1, k);
            }
            if !down {
                stamp(xi, yi + 1, k);
            }
        }
    }
    let mut counts = vec![0usize; m.num_planes() + 1];
    for &l in &out {
        counts[l as usize] += 1;
    }
    if counts[1..].iter().all(|&c| c > 0) {
        return PlaneSegmentMap {
            width: m.width,
            height: m.height,
            labels: out,
            planes: m.planes,
        };
    }
    PlaneSegmentMap::compacted(m.width, m.height, out)
        .expect("compacted labels are valid")
        .0
}

/// Boundary pixels of every region: pixels with a 4-neighbor inside the image
/// that carries a different label. Index 0 (background) is left empty.
fn region_boundaries(m: &PlaneSegmentMap) -> Vec<Vec<(i32, i32)>> {
    let (w, h) = (m.width as usize, m.height as usize);
    let mut out = vec![Vec::new(); m.num_planes() + 1];
    for y in 0..h {
        let row = &m.labels[y * w..(y + 1) * w];
        for x in 0..w {
            let k = row[x];
            if k == 0 {
                continue;
            }
            let boundary = (x > 0 && row[x - 1] != k)
                || (x + 1 < w && row[x + 1] != k)
                || (y > 0 && m.labels[(y - 1) * w + x] != k)
                || (y + 1 < h && m.labels[(y + 1) * w + x] != k);
            if boundary {
                out[k as usize].push((x as i32, y as i32));
            }
        }
    }
    out
}

const TILE_SHIFT: i32 = 6;

/// Boundary pixels grouped into square tiles, each with its bounding box.
fn tiles(points: &[(i32, i32)]) -> Vec<([i32; 4], Vec<(i32, i32)>)> {
    let mut groups: std::collections::BTreeMap<(i32, i32), Vec<(i32, i32)>> = Default::default();
    for &p in points {
        groups
            .entry((p.0 >> TILE_SHIFT, p.1 >> TILE_SHIFT))
            .or_default()
            .push(p);
    }
    groups
        .into_values()
        .map(|pts| {
            let mut bb = [i32::MAX, i32::MAX, i32::MIN, i32::MIN];
            for &(x, y) in &pts {
                bb = [bb[0].min(x), bb[1].min(y), bb[2].max(x), bb[3].max(y)];
            }
            (bb, pts)
        })
        .collect()
}

/// Minimum pixel-center distance between two boundary sets; 0 when the
/// regions touch (8-adjacency).
fn boundary_distance(a: &[(i32, i32)], b: &[(i32, i32)]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let (ta, tb) = (tiles(a), tiles(b));
    let mut pairs: Vec<(i64, usize, usize)> = Vec::with_capacity(ta.len() * tb.len());
    for (i, (ba, _)) in ta.iter().enumerate() {
        for (j, (bb, _)) in tb.iter().enumerate() {
            let dx = (bb[0] - ba[2]).max(ba[0] - bb[2]).max(0) as i64;
            let dy = (bb[1] - ba[3]).max(ba[1] - bb[3]).max(0) as i64;
            pairs.push((dx * dx + dy * dy, i, j));
        }
    }
    pairs.sort_unstable();
    let mut best = i64::MAX;
    for (bound, i, j) in pairs {
        if bound >= best {
            break;
        }
        for &(px, py) in &ta[i].1 {
            for &(qx, qy) in &tb[j].1 {
                let (dx, dy) = ((qx - px) as i64, (qy - py) as i64);
                best = best.min(dx * dx + dy * dy);
            }
        }
        if best <= 2 {
            return 0.0;
        }
    }
    (best as f64).sqrt()
}

/// Minimum Euclidean distance between pixels of planes `a` and `b`; 0 when
/// the regions touch.
pub fn min_region_distance(m: &PlaneSegmentMap, a: u16, b: u16) -> Result<f64> {
    m.check_plane(a)?;
    m.check_plane(b)?;
    if a == b {
        return Ok(0.0);
    }
    let bounds = region_boundaries(m);
    Ok(boundary_distance(&bounds[a as usize], &bounds[b as usize]))
}

/// Complete graph over the planes of one image with minimum inter-region
/// distances as edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGraph {
    /// `distances[i][j]` between planes `i + 1` and `j + 1`, pixels.
    pub distances: Vec<Vec<f64>>,
}

impl PlaneGraph {
    pub fn build(m: &PlaneSegmentMap) -> Self {
        let bounds = region_boundaries(m);
        let h = m.num_planes();
        let mut distances = vec![vec![0.0; h]; h];
        for i in 0..h {
            for j in i + 1..h {
                let d = boundary_distance(&bounds[i + 1], &bounds[j + 1]);
                distances[i][j] = d;
                distances[j][i] = d;
            }
        }
        PlaneGraph { distances }
    }

    pub fn num_nodes(&self) -> usize {
        self.distances.len()
    }
}

/// Number of pairs whose reference point lies in plane `a` of `m_ref` and
/// whose current point lies in plane `c_id` of `m_cur`.
pub fn node_affinity(
    c: &CorrespondenceSet,
    m_ref: &PlaneSegmentMap,
    m_cur: &PlaneSegmentMap,
    a: u16,
    c_id: u16,
) -> usize {
    c.iter()
        .filter(|p| m_ref.label_at(&p.a) == a && m_cur.label_at(&p.b) == c_id)
        .count()
}

/// All node affinities as an H×M count matrix (row: reference plane − 1).
pub fn node_affinities(
    c: &CorrespondenceSet,
    m_ref: &PlaneSegmentMap,
    m_cur: &PlaneSegmentMap,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m_ref.num_planes(), m_cur.num_planes());
    for p in c {
        let (a, b) = (m_ref.label_at(&p.a), m_cur.label_at(&p.b));
        if a > 0 && b > 0 {
            out[(a as usize - 1, b as usize - 1)] += 1.0;
        }
    }
    out
}

/// Similarity of two inter-plane distances, `exp(−|d_ref − d_cur| / σ)`.
pub fn edge_affinity(d_ref: f64, d_cur: f64, sigma: f64) -> f64 {
    (-(d_ref - d_cur).abs() / sigma).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    /// Kernel width of the edge similarity, pixels.
    pub sigma: f64,
    /// Divide node terms and edge terms by their respective maxima.
    pub normalize: bool,
}

/// Affinity matrix over candidate pairs `(a, c)`, indexed `c·H + a` (the
/// column-major expansion of the H×M assignment matrix).
pub fn assemble_affinity(
    nodes: &DMatrix<f64>,
    g_ref: &PlaneGraph,
    g_cur: &PlaneGraph,
    cfg: &AffinityConfig,
) -> Result<DMatrix<f64>> {
    let (h, m) = nodes.shape();
    if h > m {
        return Err(AcrError::Orientation { h, m });
    }
    if g_ref.num_nodes() != h || g_cur.num_nodes() != m {
        return Err(AcrError::InvalidInput(format!(
            "graphs have {} and {} nodes for a {h}×{m} node matrix",
            g_ref.num_nodes(),
            g_cur.num_nodes()
        )));
    }
    if !(cfg.sigma > 0.0) {
        return Err(AcrError::Config(format!(
            "sigma must be positive, got {}",
            cfg.sigma
        )));
    }
    let idx = |a: usize, c: usize| c * h + a;
    let mut w = DMatrix::zeros(h * m, h * m);
    for a in 0..h {
        for c in 0..m {
            w[(idx(a, c), idx(a, c))] = nodes[(a, c)];
        }
    }
    for a in 0..h {
        for b in 0..h {
            if a == b {
                continue;
            }
            for c in 0..m {
                for d in 0..m {
                    if c == d {
                        continue;
                    }
                    w[(idx(a, c), idx(b, d))] =
                        edge_affinity(g_ref.distances[a][b], g_cur.distances[c][d], cfg.sigma);
                }
            }
        }
    }
    if cfg.normalize {
        let n = h * m;
        let (mut node_max, mut edge_max) = (0.0f64, 0.0f64);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    node_max = node_max.max(w[(i, j)]);
                } else {
                    edge_max = edge_max.max(w[(i, j)]);
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let max = if i == j { node_max } else { edge_max };
                if max > 0.0 {
                    w[(i, j)] /= max;
                }
            }
        }
    }
    Ok(w)
}

/// One-to-one mapping from each of the H reference planes to a distinct
/// current plane.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub h: usize,
    pub m: usize,
    /// `map[a] = c`: reference plane `a + 1` pairs with current plane `c + 1`.
    pub map: Vec<usize>,
}

impl Assignment {
    /// The H×M binary matrix `U`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(self.h, self.m);
        for (a, &c) in self.map.iter().enumerate() {
            u[(a, c)] = 1.0;
        }
        u
    }

    /// `vec(U)ᵀ W vec(U)`.
    pub fn score(&self, w: &DMatrix<f64>) -> f64 {
        let idx: Vec<usize> = self
            .map
            .iter()
            .enumerate()
            .map(|(a, &c)| c * self.h + a)
            .collect();
        idx.iter()
            .map(|&i| idx.iter().map(|&j| w[(i, j)]).sum::<f64>())
            .sum()
    }

    pub fn is_feasible(&self) -> bool {
        let mut used = vec![false; self.m];
        self.map.len() == self.h
            && self
                .map
                .iter()
                .all(|&c| c < self.m && !std::mem::replace(&mut used[c], true))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Exact when within budget, spectral otherwise.
    #[default]
    Auto,
    Exact,
    Spectral,
}

/// Default number of injections exact matching may enumerate.
pub const EXACT_BUDGET: u128 = 1_000_000;

/// Number of injections from H reference planes into M current planes.
pub fn injection_count(h: usize, m: usize) -> u128 {
    if h > m {
        return 0;
    }
    ((m - h + 1)..=m).fold(1u128, |acc, k| acc.saturating_mul(k as u128))
}

/// Maximizes `vec(U)ᵀ W vec(U)` over one-to-one assignments.
pub fn solve_matching(
    w: &DMatrix<f64>,
    h: usize,
    m: usize,
    mode: MatchMode,
    budget: u128,
) -> Result<Assignment> {
    if h > m {
        return Err(AcrError::Orientation { h, m });
    }
    if w.shape() != (h * m, h * m) {
        let n = h * m;
        return Err(AcrError::InvalidInput(format!(
            "affinity is {:?}, expected {n}×{n}",
            w.shape()
        )));
    }
    let count = injection_count(h, m);
    match mode {
        MatchMode::Exact if count > budget => Err(AcrError::BudgetExceeded { count, budget }),
        MatchMode::Exact => Ok(solve_exact(w, h, m)),
        MatchMode::Spectral => Ok(solve_spectral(w, h, m)),
        MatchMode::Auto if count <= budget => Ok(solve_exact(w, h, m)),
        MatchMode::Auto => Ok(solve_spectral(w, h, m)),
    }
}

fn solve_exact(w: &DMatrix<f64>, h: usize, m: usize) -> Assignment {
    struct Search<'a> {
        w: &'a DMatrix<f64>,
        h: usize,
        m: usize,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_score: f64,
    }
    impl Search<'_> {
        fn run(&mut self, a: usize, score: f64) {
            if a == self.h {
                if score > self.best_score {
                    self.best_score = score;
                    self.best = self.current.clone();
                }
                return;
            }
            for c in 0..self.m {
                if self.used[c] {
                    continue;
                }
                let i = c * self.h + a;
                let mut gain = self.w[(i, i)];
                for (b, &d) in self.current.iter().enumerate() {
                    let j = d * self.h + b;
                    gain += self.w[(i, j)] + self.w[(j, i)];
                }
                self.used[c] = true;
                self.current.push(c);
                self.run(a + 1, score + gain);
                self.current.pop();
                self.used[c] = false;
            }
        }
    }
    let mut s = Search {
        w,
        h,
        m,
        used: vec![false; m],
        current: Vec::with_capacity(h),
        best: Vec::new(),
        best_score: f64::NEG_INFINITY,
    };
    s.run(0, 0.0);
    Assignment { h, m, map: s.best }
}

fn solve_spectral(w: &DMatrix<f64>, h: usize, m: usize) -> Assignment {
    let eig = w.clone().symmetric_eigen();
    let (lead, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty affinity");
    let v: Vec<f64> = eig
        .eigenvectors
        .column(lead)
        .iter()
        .map(|x| x.abs())
        .collect();
    let mut map = vec![usize::MAX; h];
    let mut row_used = vec![false; h];
    let mut col_used = vec![false; m];
    for _ in 0..h {
        let mut best: Option<(usize, usize, f64)> = None;
        for c in 0..m {
            if col_used[c] {
                continue;
            }
            for a in 0..h {
                if row_used[a] {
                    continue;
                }
                let val = v[c * h + a];
                if best.is_none_or(|b| val > b.2) {
                    best = Some((a, c, val));
                }
            }
        }
        let (a, c, _) = best.expect("free row and column remain");
        map[a] = c;
        row_used[a] = true;
        col_used[c] = true;
    }
    Assignment { h, m, map }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct PlaneMatchConfig {
    pub erosion_radius: f64,
    /// Edge-kernel width; `None` uses 10% of the reference image diagonal.
    pub sigma: Option<f64>,
    pub normalize: bool,
    pub mode: MatchMode,
    pub budget: u128,
}

impl Default for PlaneMatchConfig {
    fn default() -> Self {
        PlaneMatchConfig {
            erosion_radius: 5.0,
            sigma: None,
            normalize: true,
            mode: MatchMode::Auto,
            budget: EXACT_BUDGET,
        }
    }
}

/// Matched plane pairs between a reference and a current map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneMatching {
    /// `(reference id, current id, shared correspondences)`.
    pub pairs: Vec<(u16, u16, usize)>,
    pub score: f64,
}

/// An eroded plane map together with its plane graph, computed once per
/// image and reusable across matchings.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedMask {
    pub eroded: PlaneSegmentMap,
    pub graph: PlaneGraph,
}

impl PreparedMask {
    pub fn new(m: &PlaneSegmentMap, erosion_radius: f64) -> Self {
        let eroded = erode_mask(m, erosion_radius);
        let graph = PlaneGraph::build(&eroded);
        PreparedMask { eroded, graph }
    }
}

/// Matches the planes of two (already eroded) maps. When the reference has
/// more planes than the current image the roles are swapped internally, so
/// some reference planes may stay unmatched.
pub fn match_planes(
    c: &CorrespondenceSet,
    m_ref: &PlaneSegmentMap,
    m_cur: &PlaneSegmentMap,
    cfg: &PlaneMatchConfig,
) -> Result<PlaneMatching> {
    let r = PreparedMask {
        eroded: m_ref.clone(),
        graph: PlaneGraph::build(m_ref),
    };
    let k = PreparedMask {
        eroded: m_cur.clone(),
        graph: PlaneGraph::build(m_cur),
    };
    match_prepared(c, &r, &k, cfg)
}

/// [`match_planes`] on prepared masks; the erosion radius in `cfg` is not
/// applied again.
pub fn match_prepared(
    c: &CorrespondenceSet,
    p_ref: &PreparedMask,
    p_cur: &PreparedMask,
    cfg: &PlaneMatchConfig,
) -> Result<PlaneMatching> {
    let (m_ref, m_cur) = (&p_ref.eroded, &p_cur.eroded);
    let (h, m) = (m_ref.num_planes(), m_cur.num_planes());
    if h == 0 || m == 0 {
        return Ok(PlaneMatching {
            pairs: Vec::new(),
            score: 0.0,
        });
    }
    let nodes = node_affinities(c, m_ref, m_cur);
    let aff = AffinityConfig {
        sigma: cfg.sigma.unwrap_or(0.1 * m_ref.size().diagonal()),
        normalize: cfg.normalize,
    };
    let swapped = h > m;
    let (nodes_o, gr, gc) = if swapped {
        (nodes.transpose(), &p_cur.graph, &p_ref.graph)
    } else {
        (nodes.clone(), &p_ref.graph, &p_cur.graph)
    };
    let (hh, mm) = nodes_o.shape();
    let w = assemble_affinity(&nodes_o, gr, gc, &aff)?;
    let asg = solve_matching(&w, hh, mm, cfg.mode, cfg.budget)?;
    let score = asg.score(&w);
    let mut pairs: Vec<(u16, u16, usize)> = asg
        .map
        .iter()
        .enumerate()
        .map(|(a, &c2)| {
            let (r, k) = if swapped { (c2, a) } else { (a, c2) };
            ((r + 1) as u16, (k + 1) as u16, nodes[(r, k)] as usize)
        })
        .collect();
    pairs.sort_unstable();
    Ok(PlaneMatching { pairs, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from_rects(w: u32, h: u32, rects: &[(u32, u32, u32, u32, u16)]) -> PlaneSegmentMap {
        let mut labels = vec![0u16; (w * h) as usize];
        for &(x0, y0, x1, y1, k) in rects {
            for y in y0..y1 {
                for x in x0..x1 {
                    labels[(y * w + x) as usize] = k;
                }
            }
        }
        PlaneSegmentMap::new(w, h, labels).unwrap()
    }

    #[test]
    fn rejects_non_contiguous_ids() {
        assert!(PlaneSegmentMap::new(2, 1, vec![0, 2]).is_err());
        assert!(PlaneSegmentMap::new(2, 1, vec![1]).is_err());
        let (m, orig) = PlaneSegmentMap::compacted(3, 1, vec![7, 0, 3]).unwrap();
        assert_eq!(m.labels(), &[2, 0, 1]);
        assert_eq!(orig, vec![3, 7]);
    }

    #[test]
    fn pgm_round_trip() {
        let m = map_from_rects(7, 5, &[(0, 0, 3, 2, 1), (4, 1, 7, 5, 2)]);
        let mut buf = Vec::new();
        m.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n7 5\n65535\n"));
        assert_eq!(PlaneSegmentMap::read_pgm(&buf[..]).unwrap(), m);
        let with_comment = b"P5 # labels\n2 1\n# max\n255\n\x01\x00".to_vec();
        let m8 = PlaneSegmentMap::read_pgm(&with_comment[..]).unwrap();
        assert_eq!(m8.labels(), &[1, 0]);
        assert!(PlaneSegmentMap::read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(PlaneSegmentMap::read_pgm(&b"P5\n4 4\n65535\n\x00"[..]).is_err());
    }

    #[test]
    fn erosion_radius_zero_is_identity() {
        let m = map_from_rects(20, 20, &[(2, 2, 12, 12, 1)]);
        assert_eq!(erode_mask(&m, 0.0), m);
    }

    #[test]
    fn erosion_of_square() {
        let m = map_from_rects(20, 20, &[(5, 5, 15, 15, 1)]);
        let e = erode_mask(&m, 2.0);
        assert_eq!(e.pixel_counts()[1], 36);
        for y in 0..20 {
            for x in 0..20 {
                let inside = (7..13).contains(&x) && (7..13).contains(&y);
                assert_eq!(e.get(x, y) == 1, inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn erosion_drops_small_regions() {
        let m = map_from_rects(20, 20, &[(1, 1, 4, 4, 1), (5, 5, 15, 15, 2)]);
        let e = erode_mask(&m, 2.0);
        assert_eq!(e.num_planes(), 1);
        assert_eq!(e.pixel_counts()[1], 36);
    }

    /// Pixel-level definition of erosion, for comparison.
    fn erode_brute(m: &PlaneSegmentMap, radius: f64) -> Vec<u16> {
        let (w, h) = (m.width() as i64, m.height() as i64);
        let r = radius.ceil() as i64 + 1;
        let mut out = m.labels().to_vec();
        for y in 0..h {
            for x in 0..w {
                let k = m.get(x as u32, y as u32);
                if k == 0 {
                    continue;
                }
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        if ((dx * dx + dy * dy) as f64) > radius * radius {
                            continue;
                        }
                        let (qx, qy) = (x + dx, y + dy);
                        let foreign = qx < 0
                            || qy < 0
                            || qx >= w
                            || qy >= h
                            || m.get(qx as u32, qy as u32) != k;
                        if foreign {
                            out[(y * w + x) as usize] = 0;
                            break 'scan;
                        }
                    }
                }
            }
        }
        out
    }

    fn random_blobs(rng: &mut ChaCha8Rng, w: u32, h: u32, n: u16) -> PlaneSegmentMap {
        let mut labels = vec![0u16; (w * h) as usize];
        for k in 1..=n {
            let (cx, cy) = (rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64);
            let (rx, ry) = (rng.gen_range(2.0..10.0), rng.gen_range(2.0..10.0));
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                    if dx * dx + dy * dy <= 1.0 {
                        labels[(y * w + x) as usize] = k;
                    }
                }
            }
        }
        PlaneSegmentMap::compacted(w, h, labels).unwrap().0
    }

    #[test]
    fn erosion_matches_pixel_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let m = random_blobs(&mut rng, 40, 30, 4);
            let radius = rng.gen_range(1.0..4.5);
            let fast = erode_mask(&m, radius);
            let brute = PlaneSegmentMap::compacted(40, 30, erode_brute(&m, radius))
                .unwrap()
                .0;
            assert_eq!(fast, brute, "radius {radius}");
        }
    }

    #[test]
    fn distances() {
        let m = map_from_rects(10, 10, &[(0, 0, 1, 1, 1), (3, 4, 4, 5, 2)]);
        assert_eq!(min_region_distance(&m, 1, 2).unwrap(), 5.0);
        let touching = map_from_rects(10, 10, &[(0, 0, 3, 3, 1), (3, 0, 6, 3, 2)]);
        assert_eq!(min_region_distance(&touching, 1, 2).unwrap(), 0.0);
        let diagonal = map_from_rects(10, 10, &[(0, 0, 3, 3, 1), (3, 3, 6, 6, 2)]);
        assert_eq!(min_region_distance(&diagonal, 1, 2).unwrap(), 0.0);
        assert!(matches!(
            min_region_distance(&m, 1, 3),
            Err(AcrError::MissingPlane(3))
        ));
    }

    #[test]
    fn distances_match_all_pairs_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = random_blobs(&mut rng, 50, 40, 4);
            let g = PlaneGraph::build(&m);
            let h = m.num_planes();
            let mut pix = vec![Vec::new(); h + 1];
            for y in 0..40 {
                for x in 0..50 {
                    pix[m.get(x, y) as usize].push((x as f64, y as f64));
                }
            }
            for a in 1..=h {
                for b in a + 1..=h {
                    let mut best = f64::INFINITY;
                    for p in &pix[a] {
                        for q in &pix[b] {
                            best = best.min((p.0 - q.0).hypot(p.1 - q.1));
                        }
                    }
                    let expect = if best <= 2f64.sqrt() { 0.0 } else { best };
                    assert!((g.distances[a - 1][b - 1] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn edge_affinity_values() {
        assert_eq!(edge_affinity(4.0, 4.0, 2.0), 1.0);
        assert!((edge_affinity(1.0, 3.0, 2.0) - (-1f64).exp()).abs() < 1e-15);
        assert!(edge_affinity(0.0, 1e6, 1.0) < 1e-300);
    }

    fn graph(d: &[&[f64]]) -> PlaneGraph {
        PlaneGraph {
            distances: d.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn affinity_layout() {
        let cfg = AffinityConfig {
            sigma: 10.0,
            normalize: false,
        };
        let one = assemble_affinity(
            &DMatrix::from_element(1, 1, 7.0),
            &graph(&[&[0.0]]),
            &graph(&[&[0.0]]),
            &cfg,
        )
        .unwrap();
        assert_eq!(one, DMatrix::from_element(1, 1, 7.0));

        let nodes = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 2.0, 6.0]);
        let gr = graph(&[&[0.0, 20.0], &[20.0, 0.0]]);
        let gc = graph(&[&[0.0, 30.0], &[30.0, 0.0]]);
        let w = assemble_affinity(&nodes, &gr, &gc, &cfg).unwrap();
        let e = (-1f64).exp();
        // Index c·H + a: (0,0)→0, (1,0)→1, (0,1)→2, (1,1)→3.
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[
                5.0, 0.0, 0.0, e, //
                0.0, 2.0, e, 0.0, //
                0.0, e, 1.0, 0.0, //
                e, 0.0, 0.0, 6.0,
            ],
        );
        assert!((w - expect).amax() < 1e-15);

        assert!(matches!(
            assemble_affinity(&DMatrix::zeros(2, 1), &gr, &graph(&[&[0.0]]), &cfg),
            Err(AcrError::Orientation { h: 2, m: 1 })
        ));
    }

    #[test]
    fn objective_matches_two_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (h, m) = (rng.gen_range(1..=4usize), 4usize);
            let nodes = DMatrix::from_fn(h, m, |_, _| rng.gen_range(0.0..10.0));
            let sym = |n: usize, rng: &mut ChaCha8Rng| {
                let mut d = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in i + 1..n {
                        d[i][j] = rng.gen_range(0.0..100.0);
                        d[j][i] = d[i][j];
                    }
                }
                PlaneGraph { distances: d }
            };
            let (gr, gc) = (sym(h, &mut rng), sym(m, &mut rng));
            let cfg = AffinityConfig {
                sigma: 25.0,
                normalize: false,
            };
            let w = assemble_affinity(&nodes, &gr, &gc, &cfg).unwrap();
            assert_eq!(w, w.transpose());
            let mut map: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                map.swap(i, rng.gen_range(0..=i));
            }
            map.truncate(h);
            let asg = Assignment { h, m, map };
            let mut two_sum = 0.0;
            for a in 0..h {
                two_sum += nodes[(a, asg.map[a])];
                for b in 0..h {
                    if a != b {
                        two_sum += edge_affinity(
                            gr.distances[a][b],
                            gc.distances[asg.map[a]][asg.map[b]],
                            25.0,
                        );
                    }
                }
            }
            assert!((asg.score(&w) - two_sum).abs() < 1e-9);
            let u = asg.matrix();
            for a in 0..h {
                assert_eq!(u.row(a).sum(), 1.0);
            }
            for c in 0..m {
                assert!(u.column(c).sum() <= 1.0);
            }
        }
    }

    #[test]
    fn single_plane_assignment() {
        let w = DMatrix::from_element(1, 1, 3.0);
        for mode in [MatchMode::Exact, MatchMode::Spectral] {
            let a = solve_matching(&w, 1, 1, mode, EXACT_BUDGET).unwrap();
            assert_eq!(a.map, vec![0]);
        }
    }

    #[test]
    fn budget_is_enforced() {
        assert_eq!(injection_count(3, 5), 60);
        assert_eq!(injection_count(10, 10), 3_628_800);
        let w = DMatrix::zeros(100, 100);
        assert!(matches!(
            solve_matching(&w, 10, 10, MatchMode::Exact, EXACT_BUDGET),
            Err(AcrError::BudgetExceeded { .. })
        ));
        let a = solve_matching(&w, 10, 10, MatchMode::Auto, EXACT_BUDGET).unwrap();
        assert!(a.is_feasible());
    }

    #[test]
    fn spectral_is_feasible_and_bounded_by_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ratios = Vec::new();
        for _ in 0..100 {
            let (h, m) = (3, 5);
            let n = h * m;
            let mut w = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
            w = (&w + w.transpose()) / 2.0;
            let exact = solve_matching(&w, h, m, MatchMode::Exact, EXACT_BUDGET).unwrap();
            let spectral = solve_matching(&w, h, m, MatchMode::Spectral, EXACT_BUDGET).unwrap();
            assert!(spectral.is_feasible() && exact.is_feasible());
            let (se, ss) = (exact.score(&w), spectral.score(&w));
            assert!(ss >= 0.0 && ss <= se + 1e-12);
            ratios.push(ss / se);
        }
        let within = ratios.iter().filter(|&&r| r >= 0.9).count();
        eprintln!("spectral within 10% of optimum in {within}/100 trials");
    }

    #[test]
    fn swapped_orientation_matches_subset() {
        // Reference has three planes, current only two (plane 2 occluded).
        let m_ref = map_from_rects(
            60,
            20,
            &[(0, 0, 10, 20, 1), (20, 0, 30, 20, 2), (45, 0, 60, 20, 3)],
        );
        let m_cur = map_from_rects(60, 20, &[(2, 0, 12, 20, 1), (47, 0, 60, 20, 2)]);
        let mut pairs = Vec::new();
        for y in 0..20 {
            pairs.push((
                PixelPoint::new(5.0, y as f64 + 0.5),
                PixelPoint::new(7.0, y as f64 + 0.5),
            ));
            pairs.push((
                PixelPoint::new(50.0, y as f64 + 0.5),
                PixelPoint::new(52.0, y as f64 + 0.5),
            ));
        }
        let c = CorrespondenceSet::from_pairs(&pairs).unwrap();
        let res = match_planes(&c, &m_ref, &m_cur, &PlaneMatchConfig::default()).unwrap();
        assert_eq!(res.pairs, vec![(1, 1, 20), (3, 2, 20)]);
    }
}
