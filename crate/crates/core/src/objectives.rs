//! Construction losses, the neighborhood regularizer, and total-loss
//! assembly.
//!
//! Cross-construction rebuilds one cloud as similarity-softmax-weighted
//! combinations of the other cloud's coordinates over the latent k nearest
//! neighbors; self-construction is the same with source == target. Chamfer
//! distances between references and reconstructions drive feature learning.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::cosine_similarity_matrix;
use crate::fx;
use crate::geometry::{chamfer_distance, knn_indices, sq_dist3, PointCloud};
use crate::tensor::Matrix;
use crate::{CoreError, Result};

/// Sign of the exponent in the neighborhood regularizer weights. `Neg`
/// down-weights distant neighbors; `Pos` matches the printed formula
/// verbatim (which up-weights them).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegSign {
    Neg,
    Pos,
}

impl RegSign {
    fn factor(self) -> f64 {
        match self {
            RegSign::Neg => -1.0,
            RegSign::Pos => 1.0,
        }
    }
}

/// Loss weights and construction hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cc: f64,
    pub lambda_sc: f64,
    /// Weight of the cross-similarity consistency loss.
    pub l1: f64,
    /// Weight of the self-similarity consistency loss.
    pub l2: f64,
    /// Weight of the angle classification loss.
    pub l3: f64,
    /// Weight of the focal domain loss.
    pub l4: f64,
    /// Weight of the neighborhood regularizer.
    pub l5: f64,
    /// Regularizer scale; `0` means self-normalizing (mean squared kNN
    /// distance of the instance).
    pub alpha: f64,
    /// Latent neighborhood size for construction and the regularizer.
    pub k: usize,
    pub reg_sign: RegSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cc: 1.0,
            lambda_sc: 10.0,
            l1: 0.1,
            l2: 0.1,
            l3: 1.0,
            l4: 0.8,
            l5: 1.0,
            alpha: 0.0,
            k: 10,
            reg_sign: RegSign::Neg,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_cc", self.lambda_cc),
            ("lambda_sc", self.lambda_sc),
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("l4", self.l4),
            ("l5", self.l5),
        ];
        for (name, v) in named {
            if !(v >= 0.0) {
                return Err(CoreError::InvalidArgument {
                    name: "loss",
                    reason: alloc::format!("weight {name} must be >= 0, got {v}"),
                });
            }
        }
        if self.k < 1 {
            return Err(CoreError::arg("loss.k", "must be >= 1"));
        }
        if self.alpha < 0.0 {
            return Err(CoreError::arg("loss.alpha", "must be >= 0 (0 = auto)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Cross,
    SelfConstructed,
}

/// Soft reconstruction of a cloud; every point is a convex combination of
/// `k` coordinates of the constructing cloud.
#[derive(Clone, Debug)]
pub struct ReconstructedCloud {
    pub points: PointCloud,
    pub provenance: Provenance,
}

/// Indices of the `k` largest entries per row, descending by value, ties
/// toward the lower index.
fn top_k_per_row(s: &Matrix, k: usize) -> Vec<usize> {
    let mut flat = Vec::with_capacity(s.rows() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(s.cols());
    for r in 0..s.rows() {
        scratch.clear();
        scratch.extend(s.row(r).iter().copied().zip(0..s.cols()));
        scratch.sort_unstable_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite similarities")
                .then(a.1.cmp(&b.1))
        });
        flat.extend(scratch[..k].iter().map(|&(_, j)| j));
    }
    flat
}

/// Tape builder: soft reconstruction from a similarity node and constant
/// target coordinates. Returns the Nx3 reconstruction node.
pub fn build_cross_construct(
    g: &mut Graph,
    similarity: NodeId,
    target_coords: NodeId,
    k: usize,
) -> Result<NodeId> {
    let s = g.value(similarity);
    let n_t = s.cols();
    if k < 1 || k > n_t {
        return Err(CoreError::BadNeighborhood { k, n: n_t });
    }
    let n_q = s.rows();
    let neighbor_cols = top_k_per_row(s, k);
    let rows: Vec<usize> = crate::nn::center_indices(n_q, k);
    let picked = g.gather_entries(similarity, n_q, k, rows, neighbor_cols.clone());
    let weights = g.softmax_rows(picked);
    let coords = g.gather_rows(target_coords, neighbor_cols);
    Ok(g.weighted_group_sum(weights, coords, k))
}

/// Directed neighbor pairs `(i, l)` over the source coordinate space
/// (self excluded) and their regularizer weights `exp(sign * d^2 / alpha)`.
/// `alpha = 0` resolves to the mean squared neighbor distance.
fn regularizer_pairs(
    x: &PointCloud,
    k: usize,
    alpha: f64,
    sign: RegSign,
) -> Result<(Vec<(usize, usize)>, Vec<f64>, f64)> {
    let n = x.n();
    if k < 1 || k > n {
        return Err(CoreError::BadNeighborhood { k, n });
    }
    // Query k+1 and drop the self hit so neighborhoods never contain i.
    let k_query = (k + 1).min(n);
    let graph = knn_indices(x, x, k_query)?;
    let mut pairs = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut taken = 0;
        for &l in graph.row(i) {
            if l == i {
                continue;
            }
            pairs.push((i, l));
            taken += 1;
            if taken == k {
                break;
            }
        }
    }
    let sq: Vec<f64> = pairs
        .iter()
        .map(|&(i, l)| sq_dist3(x.point(i), x.point(l)))
        .collect();
    let alpha = if alpha > 0.0 {
        alpha
    } else {
        (sq.iter().sum::<f64>() / sq.len().max(1) as f64).max(1e-12)
    };
    let weights = sq.iter().map(|&d| fx::exp(sign.factor() * d / alpha)).collect();
    Ok((pairs, weights, alpha))
}

/// Tape builder for the neighborhood regularizer over a reconstruction node.
pub fn build_mapping_regularizer(
    g: &mut Graph,
    reconstruction: NodeId,
    x: &PointCloud,
    k: usize,
    alpha: f64,
    sign: RegSign,
) -> Result<NodeId> {
    let (pairs, weights, _) = regularizer_pairs(x, k, alpha, sign)?;
    Ok(g.pairwise_shrink(reconstruction, pairs, weights))
}

// ---------------------------------------------------------------------------
// Pure (value-only) entry points.
// ---------------------------------------------------------------------------

/// For each source row, softmax the `k` largest similarities and return the
/// weighted sum of the matching target coordinates.
pub fn cross_construct(s: &Matrix, y: &PointCloud, k: usize) -> Result<ReconstructedCloud> {
    if s.cols() != y.n() {
        return Err(CoreError::shape(
            alloc::format!("similarity with {} columns", y.n()),
            alloc::format!("{}x{}", s.rows(), s.cols()),
        ));
    }
    let mut g = Graph::new();
    let sn = g.constant(s.clone());
    let yn = g.constant(y.to_matrix());
    let out = build_cross_construct(&mut g, sn, yn, k)?;
    Ok(ReconstructedCloud {
        points: PointCloud::from_matrix(g.value(out))?,
        provenance: Provenance::Cross,
    })
}

/// Cross-construction of a cloud against itself via the cosine
/// self-similarity of its features.
pub fn self_construct(features: &Matrix, x: &PointCloud, k: usize) -> Result<ReconstructedCloud> {
    if features.rows() != x.n() {
        return Err(CoreError::shape(
            alloc::format!("{} feature rows", x.n()),
            alloc::format!("{}", features.rows()),
        ));
    }
    let s = cosine_similarity_matrix(features, features)?;
    let mut rec = cross_construct(&s, x, k)?;
    rec.provenance = Provenance::SelfConstructed;
    Ok(rec)
}

/// `lambda_cc (CD(Y_s, Y^x) + CD(X_s, X^y)) + lambda_sc (CD(Y_s, Y^y) + CD(X_s, X^x))`.
pub fn construction_loss(
    y_s: &PointCloud,
    y_cross: &ReconstructedCloud,
    x_s: &PointCloud,
    x_cross: &ReconstructedCloud,
    y_self: &ReconstructedCloud,
    x_self: &ReconstructedCloud,
    w: &LossWeights,
) -> f64 {
    let cross = chamfer_distance(y_s, &y_cross.points) + chamfer_distance(x_s, &x_cross.points);
    let selfc = chamfer_distance(y_s, &y_self.points) + chamfer_distance(x_s, &x_self.points);
    w.lambda_cc * cross + w.lambda_sc * selfc
}

/// `sum_i sum_{l in N(x_i)} exp(sign |x_i - x_l|^2 / alpha) |y_i - y_l|^2`
/// with neighborhoods in the source coordinate space.
pub fn mapping_regularizer(
    x: &PointCloud,
    reconstruction: &ReconstructedCloud,
    k: usize,
    alpha: f64,
    sign: RegSign,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(CoreError::arg("alpha", alloc::format!("{alpha} must be > 0")));
    }
    if reconstruction.points.n() != x.n() {
        return Err(CoreError::shape(
            alloc::format!("{} reconstructed points", x.n()),
            alloc::format!("{}", reconstruction.points.n()),
        ));
    }
    let (pairs, weights, _) = regularizer_pairs(x, k, alpha, sign)?;
    let yhat = &reconstruction.points;
    Ok(pairs
        .iter()
        .zip(&weights)
        .map(|(&(i, l), &w)| w * sq_dist3(yhat.point(i), yhat.point(l)))
        .sum())
}

/// `l1 ccs + l2 css + l3 angle + l4 domain + cons + l5 norm`.
pub fn total_loss(
    l_ccs: f64,
    l_css: f64,
    l_angle: f64,
    l_domain: f64,
    l_cons: f64,
    l_norm: f64,
    w: &LossWeights,
) -> Result<f64> {
    let named = [
        ("l_ccs", l_ccs),
        ("l_css", l_css),
        ("l_angle", l_angle),
        ("l_domain", l_domain),
        ("l_cons", l_cons),
        ("l_norm", l_norm),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(CoreError::NonFinite(match name {
                "l_ccs" => "l_ccs",
                "l_css" => "l_css",
                "l_angle" => "l_angle",
                "l_domain" => "l_domain",
                "l_cons" => "l_cons",
                _ => "l_norm",
            }));
        }
    }
    Ok(w.l1 * l_ccs + w.l2 * l_css + w.l3 * l_angle + w.l4 * l_domain + l_cons + w.l5 * l_norm)
}
