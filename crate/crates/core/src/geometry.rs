//! Deterministic geometric primitives: point clouds, z-axis rotations, kNN
//! graphs, Chamfer distance, diameters, and seeded downsampling.
//!
//! Point order is meaningful everywhere: index `i` of an augmented or
//! deformed clone refers to the same physical point as index `i` of the
//! original cloud. No operation here is allowed to permute indices silently.

use alloc::vec::Vec;

use crate::fx;
use crate::rng::SeedRng;
use crate::tensor::Matrix;
use crate::{CoreError, Result};

pub const TAU: f64 = core::f64::consts::TAU;

/// Ordered list of 3D points (coordinates in centimeters).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    /// Builds a cloud, enforcing the basic invariants: at least one point,
    /// all coordinates finite.
    pub fn from_points(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::InvalidCloud("empty point set".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(CoreError::InvalidCloud(alloc::format!(
                    "non-finite coordinate at point {i}"
                )));
            }
        }
        Ok(PointCloud { points })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    #[inline]
    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// N x 3 coordinate matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.n(), 3, |r, c| self.points[r][c])
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.cols() != 3 {
            return Err(CoreError::shape("Nx3", alloc::format!("{}x{}", m.rows(), m.cols())));
        }
        let points = (0..m.rows())
            .map(|r| [m.at(r, 0), m.at(r, 1), m.at(r, 2)])
            .collect();
        PointCloud::from_points(points)
    }

    /// Clone translated so the centroid sits at the origin.
    pub fn centered(&self) -> PointCloud {
        let c = self.centroid();
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
                .collect(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.n() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Reorders points by `perm`: output point `i` is input point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(CoreError::shape(
                alloc::format!("permutation of length {}", self.n()),
                alloc::format!("length {}", perm.len()),
            ));
        }
        let points = perm.iter().map(|&i| self.points[i]).collect();
        PointCloud::from_points(points)
    }
}

#[inline]
pub fn sq_dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    fx::sqrt(sq_dist3(a, b))
}

/// Rotation about the vertical z-axis; angle normalized into `[0, 2pi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZRotation {
    radians: f64,
}

impl ZRotation {
    /// Wraps any finite angle into `[0, 2pi)`.
    pub fn from_radians(radians: f64) -> Self {
        let mut r = fx::rem_euclid(radians, TAU);
        // rem_euclid can return exactly TAU for tiny negative inputs.
        if r >= TAU {
            r -= TAU;
        }
        ZRotation { radians: r }
    }

    #[inline]
    pub fn radians(&self) -> f64 {
        self.radians
    }

    pub fn inverse(&self) -> ZRotation {
        ZRotation::from_radians(-self.radians)
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (fx::sin(self.radians), fx::cos(self.radians));
        [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
    }
}

/// Rotates every point about the z-axis; point order is preserved.
pub fn rotate_z(cloud: &PointCloud, rot: ZRotation) -> PointCloud {
    // Rotation of a valid cloud cannot violate cloud invariants.
    PointCloud {
        points: cloud.points.iter().map(|&p| rot.apply(p)).collect(),
    }
}

/// Perturbs every coordinate by an independent zero-mean Gaussian sample of
/// std `sigma`. Deterministic given `seed`.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) {
        return Err(CoreError::arg("sigma", alloc::format!("must be >= 0, got {sigma}")));
    }
    let mut rng = SeedRng::new(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                p[0] + sigma * rng.normal(),
                p[1] + sigma * rng.normal(),
                p[2] + sigma * rng.normal(),
            ]
        })
        .collect();
    Ok(PointCloud { points })
}

/// Which metric space a kNN graph was built in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphSpace {
    Coordinate,
    Feature,
}

/// Row-major N x k neighbor index table into a reference set.
///
/// Each row holds `k` distinct reference indices sorted by nondecreasing
/// distance; ties break toward the lower index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    indices: Vec<usize>,
    n: usize,
    k: usize,
    space: GraphSpace,
}

impl KnnGraph {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn space(&self) -> GraphSpace {
        self.space
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Flattened row-major indices, length n*k.
    #[inline]
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Anything that can serve as a set of equal-length rows for kNN queries.
pub trait RowSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn space(&self) -> GraphSpace;
}

impl RowSource for PointCloud {
    fn len(&self) -> usize {
        self.n()
    }
    fn dim(&self) -> usize {
        3
    }
    fn row(&self, i: usize) -> &[f64] {
        &self.points[i]
    }
    fn space(&self) -> GraphSpace {
        GraphSpace::Coordinate
    }
}

impl RowSource for Matrix {
    fn len(&self) -> usize {
        self.rows()
    }
    fn dim(&self) -> usize {
        self.cols()
    }
    fn row(&self, i: usize) -> &[f64] {
        Matrix::row(self, i)
    }
    fn space(&self) -> GraphSpace {
        GraphSpace::Feature
    }
}

fn sq_dist_rows(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each query row, the `k` nearest reference rows by Euclidean distance;
/// ties break toward the lower index.
pub fn knn_indices<R: RowSource>(query: &R, reference: &R, k: usize) -> Result<KnnGraph> {
    let n_ref = reference.len();
    if k < 1 || k > n_ref {
        return Err(CoreError::BadNeighborhood { k, n: n_ref });
    }
    debug_assert_eq!(query.dim(), reference.dim());
    let n_q = query.len();
    let mut indices = Vec::with_capacity(n_q * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n_ref);
    for qi in 0..n_q {
        let q = query.row(qi);
        scratch.clear();
        scratch.extend((0..n_ref).map(|ri| (sq_dist_rows(q, reference.row(ri)), ri)));
        // Finite distances admit a total order; (dist, index) breaks ties low.
        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        indices.extend(scratch[..k].iter().map(|&(_, ri)| ri));
    }
    Ok(KnnGraph {
        indices,
        n: n_q,
        k,
        space: reference.space(),
    })
}

/// Symmetric Chamfer distance under the squared convention: mean over `a` of
/// the squared distance to the nearest point of `b`, plus the mirrored term.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    fn one_way(from: &PointCloud, to: &PointCloud) -> f64 {
        let mut acc = 0.0;
        for p in from.points() {
            let mut best = f64::INFINITY;
            for q in to.points() {
                let d = sq_dist3(*p, *q);
                if d < best {
                    best = d;
                }
            }
            acc += best;
        }
        acc / from.n() as f64
    }
    one_way(a, b) + one_way(b, a)
}

/// Maximum pairwise Euclidean distance.
pub fn max_diameter(cloud: &PointCloud) -> f64 {
    let pts = cloud.points();
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d = sq_dist3(pts[i], pts[j]);
            if d > best {
                best = d;
            }
        }
    }
    fx::sqrt(best)
}

/// Maps each source point to its ground-truth target index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMap {
    target_index: Vec<usize>,
}

impl GroundTruthMap {
    pub fn new(target_index: Vec<usize>, n_target: usize) -> Result<Self> {
        if let Some(&bad) = target_index.iter().find(|&&t| t >= n_target) {
            return Err(CoreError::arg(
                "gt",
                alloc::format!("target index {bad} out of range for {n_target} points"),
            ));
        }
        Ok(GroundTruthMap { target_index })
    }

    pub fn identity(n: usize) -> Self {
        GroundTruthMap {
            target_index: (0..n).collect(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }

    #[inline]
    pub fn target_of(&self, source: usize) -> usize {
        self.target_index[source]
    }

    #[inline]
    pub fn as_slice(&self) -> &[usize] {
        &self.target_index
    }

    pub fn is_bijection(&self, n_target: usize) -> bool {
        if self.target_index.len() != n_target {
            return false;
        }
        let mut seen = alloc::vec![false; n_target];
        for &t in &self.target_index {
            if t >= n_target || seen[t] {
                return false;
            }
            seen[t] = true;
        }
        true
    }
}

/// Result of downsampling a single cloud.
#[derive(Clone, Debug)]
pub struct Downsampled {
    pub cloud: PointCloud,
    /// Original index of each retained point, in retained order.
    pub kept: Vec<usize>,
    /// Ground truth remapped onto the retained source rows (target side
    /// untouched).
    pub gt: Option<GroundTruthMap>,
}

/// Uniform random subset of `n` points without replacement, deterministic
/// given `seed`. If a ground-truth map is supplied its rows are remapped to
/// the retained source points; no row may dangle because the target set is
/// left intact.
pub fn downsample(
    cloud: &PointCloud,
    n: usize,
    seed: u64,
    gt: Option<&GroundTruthMap>,
) -> Result<Downsampled> {
    if n > cloud.n() || n == 0 {
        return Err(CoreError::arg(
            "n",
            alloc::format!("sample size {n} out of range for cloud of {} points", cloud.n()),
        ));
    }
    let mut rng = SeedRng::new(seed);
    let kept = rng.sample_indices(cloud.n(), n);
    let points = kept.iter().map(|&i| cloud.points[i]).collect();
    let gt = gt.map(|g| GroundTruthMap {
        target_index: kept.iter().map(|&i| g.target_of(i)).collect(),
    });
    Ok(Downsampled {
        cloud: PointCloud { points },
        kept,
        gt,
    })
}

/// Downsamples source and target independently; the ground truth is rebuilt
/// by snapping each retained source row's original target to the nearest
/// retained target point. Used for clouds that do not share point identity.
pub fn downsample_pair_independent(
    source: &PointCloud,
    target: &PointCloud,
    n: usize,
    seed: u64,
    gt: &GroundTruthMap,
) -> Result<(PointCloud, PointCloud, GroundTruthMap)> {
    let s = downsample(source, n, crate::rng::derive_seed(seed, 0, 0), None)?;
    let t = downsample(target, n, crate::rng::derive_seed(seed, 1, 0), None)?;
    let mut target_index = Vec::with_capacity(n);
    for &src_orig in &s.kept {
        let true_target = target.point(gt.target_of(src_orig));
        let mut best = (f64::INFINITY, 0usize);
        for (new_idx, p) in t.cloud.points().iter().enumerate() {
            let d = sq_dist3(true_target, *p);
            if d < best.0 {
                best = (d, new_idx);
            }
        }
        target_index.push(best.1);
    }
    Ok((s.cloud, t.cloud, GroundTruthMap { target_index }))
}
