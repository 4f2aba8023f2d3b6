//! Parameter storage and the layer building blocks shared by the backbone
//! and the orientation module.
//!
//! All learnable tensors live in a flat [`ParamStore`]; layer structs hold
//! indices into it. EMA updates, the optimizer, and checkpoints iterate the
//! store uniformly, so there is a single canonical parameter order.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::geometry::KnnGraph;
use crate::rng::SeedRng;
use crate::tensor::Matrix;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat, named parameter set with a stable iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, m: Matrix) -> ParamId {
        self.names.push(name.into());
        self.mats.push(m);
        ParamId(self.mats.len() - 1)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mats(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Matrix] {
        &mut self.mats
    }

    /// True when the two stores have identical names and tensor shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .mats
                .iter()
                .zip(&other.mats)
                .all(|(a, b)| a.same_shape(b))
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.mats.iter().map(Matrix::len).sum()
    }
}

/// Tape leaves for every store entry, in store order.
pub struct BoundParams {
    leaves: Vec<NodeId>,
}

impl BoundParams {
    /// Registers every parameter as a differentiable leaf on `g`.
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Self {
        BoundParams {
            leaves: store.mats().iter().map(|m| g.param(m)).collect(),
        }
    }

    /// Registers every parameter as a constant (teacher / inference mode).
    pub fn bind_frozen(g: &mut Graph, store: &ParamStore) -> Self {
        BoundParams {
            leaves: store.mats().iter().map(|m| g.constant(m.clone())).collect(),
        }
    }

    #[inline]
    pub fn node(&self, id: ParamId) -> NodeId {
        self.leaves[id.0]
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }
}

/// Dense layer `x @ w + b` with `w: in_dim x out_dim`, `b: 1 x out_dim`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform fan-in init: `U(-1/sqrt(in_dim), 1/sqrt(in_dim))`.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = 1.0 / crate::fx::sqrt(in_dim as f64);
        let w = Matrix::from_fn(in_dim, out_dim, |_, _| rng.uniform_symmetric(bound));
        let b = Matrix::from_fn(1, out_dim, |_, _| rng.uniform_symmetric(bound));
        Linear {
            w: store.add(alloc::format!("{name}.w"), w),
            b: store.add(alloc::format!("{name}.b"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> NodeId {
        let mm = g.matmul(x, bound.node(self.w));
        g.add_row(mm, bound.node(self.b))
    }
}

/// Per-row layer normalization with learnable gain/bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = Matrix::from_fn(1, dim, |_, _| 1.0);
        let bias = Matrix::zeros(1, dim);
        LayerNorm {
            gain: store.add(alloc::format!("{name}.gain"), gain),
            bias: store.add(alloc::format!("{name}.bias"), bias),
        }
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> NodeId {
        g.layer_norm_rows(x, bound.node(self.gain), bound.node(self.bias), LAYER_NORM_EPS)
    }
}

/// Per-column standardization over rows (channel statistics of one cloud or
/// edge set) with learnable gain/bias. The batch-size-one stand-in for the
/// batch normalization of conventional EdgeConv stacks; statistics are
/// recomputed every forward, so train and eval behave identically.
#[derive(Clone, Debug)]
pub struct ColumnNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const COL_NORM_EPS: f64 = 1e-5;

impl ColumnNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        ColumnNorm {
            gain: store.add(alloc::format!("{name}.gain"), Matrix::from_fn(1, dim, |_, _| 1.0)),
            bias: store.add(alloc::format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> NodeId {
        g.col_norm_rows(x, bound.node(self.gain), bound.node(self.bias), COL_NORM_EPS)
    }
}

/// EdgeConv block: edge MLP over `(center, neighbor - center)` pairs with
/// channel normalization, max-pool over the neighborhood, leaky activation.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub lin: Linear,
    pub norm: ColumnNorm,
    pub slope: f64,
}

impl EdgeConv {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        slope: f64,
    ) -> Self {
        EdgeConv {
            lin: Linear::init(store, rng, name, 2 * in_dim, out_dim),
            norm: ColumnNorm::init(store, &alloc::format!("{name}.norm"), out_dim),
            slope,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.lin.in_dim / 2
    }

    pub fn out_dim(&self) -> usize {
        self.lin.out_dim
    }

    /// Applies the block to per-point features using a fixed neighbor graph.
    ///
    /// Max and leaky-relu commute (both monotone nondecreasing), so pooling
    /// before the activation matches the conventional MLP-then-pool form.
    pub fn apply(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        feats: NodeId,
        graph: &KnnGraph,
    ) -> NodeId {
        let k = graph.k();
        let centers = center_indices(graph.n(), k);
        let center_feats = g.gather_rows(feats, centers);
        let neigh_feats = g.gather_rows(feats, graph.flat().to_vec());
        let rel = g.sub(neigh_feats, center_feats);
        let edges = g.concat_cols(center_feats, rel);
        let mapped = self.lin.apply(g, bound, edges);
        let normed = self.norm.apply(g, bound, mapped);
        let pooled = g.group_max_pool(normed, k);
        g.leaky_relu(pooled, self.slope)
    }
}

/// `[0,0,..,0, 1,1,..,1, ...]`: each row index repeated `k` times.
pub fn center_indices(n: usize, k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * k);
    for i in 0..n {
        idx.extend(core::iter::repeat(i).take(k));
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn_indices, PointCloud};

    #[test]
    fn store_layout_comparison() {
        let mut rng = SeedRng::new(0);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Linear::init(&mut a, &mut rng, "l", 4, 8);
        Linear::init(&mut b, &mut rng, "l", 4, 8);
        assert!(a.same_layout(&b));
        let mut c = ParamStore::new();
        Linear::init(&mut c, &mut rng, "other", 4, 8);
        assert!(!a.same_layout(&c));
    }

    #[test]
    fn linear_shapes_and_determinism() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let l1 = Linear::init(&mut s1, &mut SeedRng::new(5), "l", 6, 3);
        let _l2 = Linear::init(&mut s2, &mut SeedRng::new(5), "l", 6, 3);
        assert_eq!(s1.get(l1.w).rows(), 6);
        assert_eq!(s1.get(l1.w).cols(), 3);
        assert_eq!(s1.mats(), s2.mats());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let l = Linear::init(&mut store, &mut SeedRng::new(9), "l", 16, 32);
        let bound = 1.0 / 4.0;
        for &v in store.get(l.w).as_slice() {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn edgeconv_k1_self_loop_is_identity_pool() {
        // With a self-loop graph the only edge per point is (h_i, 0); the
        // max-pool over that single edge returns the edge's own value.
        let mut store = ParamStore::new();
        let ec = EdgeConv::init(&mut store, &mut SeedRng::new(3), "ec", 3, 4, 0.2);
        let cloud = PointCloud::from_points(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap();
        let graph = knn_indices(&cloud, &cloud, 1).unwrap();

        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store);
        let feats = g.constant(cloud.to_matrix());
        let out = ec.apply(&mut g, &bound, feats, &graph);
        assert_eq!(g.value(out).rows(), 3);
        assert_eq!(g.value(out).cols(), 4);

        // Oracle: linear over the three self-edges, channel standardization
        // across them, leaky activation; no pooling interaction at k = 1.
        let w = store.get(ec.lin.w);
        let b = store.get(ec.lin.b);
        let mut pre = [[0.0f64; 4]; 3];
        for (p, row) in cloud.points().iter().enumerate() {
            let edge = [row[0], row[1], row[2], 0.0, 0.0, 0.0];
            for c in 0..4 {
                pre[p][c] = b.at(0, c)
                    + edge
                        .iter()
                        .enumerate()
                        .map(|(i, &e)| e * w.at(i, c))
                        .sum::<f64>();
            }
        }
        for c in 0..4 {
            let mean = (pre[0][c] + pre[1][c] + pre[2][c]) / 3.0;
            let var = pre.iter().map(|r| (r[c] - mean) * (r[c] - mean)).sum::<f64>() / 3.0;
            let inv = 1.0 / (var + COL_NORM_EPS).sqrt();
            for p in 0..3 {
                let z = (pre[p][c] - mean) * inv;
                let want = if z > 0.0 { z } else { 0.2 * z };
                assert!((g.value(out).at(p, c) - want).abs() < 1e-12);
            }
        }
    }
}
