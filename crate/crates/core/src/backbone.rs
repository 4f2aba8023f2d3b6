//! Static-graph EdgeConv feature extractor and the cosine similarity matrix.
//!
//! The backbone builds one kNN graph in coordinate space from the input
//! cloud and reuses it for all four EdgeConv blocks, unlike the dynamic
//! per-layer feature-space graphs of the original EdgeConv stacking.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::geometry::{knn_indices, KnnGraph, PointCloud};
use crate::nn::{BoundParams, ColumnNorm, EdgeConv, Linear, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::Matrix;
use crate::{CoreError, Result};

/// Per-point embedding matrix (row `i` belongs to point `i`).
pub type FeatureMatrix = Matrix;

/// Denominator clamp for cosine similarity; clamped rows are counted by
/// [`zero_norm_clamp_count`].
pub const COSINE_EPS: f64 = 1e-8;

pub use crate::autodiff::{norm_clamp_count as zero_norm_clamp_count, reset_norm_clamp_count};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output widths of the four EdgeConv blocks.
    pub channels: [usize; 4],
    /// Width of the final per-point embedding.
    pub embed: usize,
    /// Neighborhood size of the static coordinate-space graph.
    pub k: usize,
    /// Concatenate all block outputs before the projection (stock DGCNN
    /// style); `false` projects the last block only.
    pub concat_multiscale: bool,
    /// LeakyReLU slope used throughout.
    pub slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [64, 64, 128, 256],
            embed: 512,
            k: 10,
            concat_multiscale: true,
            slope: 0.2,
        }
    }
}

impl BackboneConfig {
    /// Small widths for desk-scale training runs.
    pub fn desk() -> Self {
        BackboneConfig {
            channels: [16, 16, 32, 64],
            embed: 96,
            ..Default::default()
        }
    }

    /// Tiny widths for finite-difference test instances.
    pub fn micro() -> Self {
        BackboneConfig {
            channels: [4, 4, 8, 8],
            embed: 16,
            k: 4,
            ..Default::default()
        }
    }
}

/// Four EdgeConv blocks plus the final per-point projection.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub cfg: BackboneConfig,
    pub blocks: [EdgeConv; 4],
    pub proj: Linear,
    pub proj_norm: ColumnNorm,
}

impl BackboneParams {
    pub fn init(store: &mut ParamStore, rng: &mut SeedRng, cfg: &BackboneConfig) -> Self {
        let c = cfg.channels;
        let blocks = [
            EdgeConv::init(store, rng, "backbone.block1", 3, c[0], cfg.slope),
            EdgeConv::init(store, rng, "backbone.block2", c[0], c[1], cfg.slope),
            EdgeConv::init(store, rng, "backbone.block3", c[1], c[2], cfg.slope),
            EdgeConv::init(store, rng, "backbone.block4", c[2], c[3], cfg.slope),
        ];
        let proj_in = if cfg.concat_multiscale {
            c.iter().sum()
        } else {
            c[3]
        };
        let proj = Linear::init(store, rng, "backbone.proj", proj_in, cfg.embed);
        let proj_norm = ColumnNorm::init(store, "backbone.proj.norm", cfg.embed);
        BackboneParams {
            cfg: cfg.clone(),
            blocks,
            proj,
            proj_norm,
        }
    }
}

/// Tape builder for the full backbone. Returns the per-point embedding node
/// and the static graph that every block used.
pub fn build_dgcnn(
    g: &mut Graph,
    bound: &BoundParams,
    params: &BackboneParams,
    cloud: &PointCloud,
) -> Result<(NodeId, KnnGraph)> {
    let graph = knn_indices(cloud, cloud, params.cfg.k)?;
    let coords = g.constant(cloud.to_matrix());
    let mut outs = Vec::with_capacity(4);
    let mut h = coords;
    for block in &params.blocks {
        h = block.apply(g, bound, h, &graph);
        outs.push(h);
    }
    let pre_proj = if params.cfg.concat_multiscale {
        let c01 = g.concat_cols(outs[0], outs[1]);
        let c012 = g.concat_cols(c01, outs[2]);
        g.concat_cols(c012, outs[3])
    } else {
        outs[3]
    };
    let proj = params.proj.apply(g, bound, pre_proj);
    let normed = params.proj_norm.apply(g, bound, proj);
    let embed = g.leaky_relu(normed, params.cfg.slope);
    Ok((embed, graph))
}

/// Tape builder for the cosine similarity matrix between two embeddings.
pub fn build_cosine_similarity(g: &mut Graph, fx: NodeId, fy: NodeId) -> NodeId {
    let nx = g.row_normalize(fx, COSINE_EPS);
    let ny = g.row_normalize(fy, COSINE_EPS);
    g.matmul_bt(nx, ny)
}

/// Single EdgeConv block as a pure function of features and a fixed graph.
pub fn edgeconv(
    features: &FeatureMatrix,
    graph: &KnnGraph,
    params: &EdgeConv,
    store: &ParamStore,
) -> Result<FeatureMatrix> {
    if features.cols() != params.in_dim() {
        return Err(CoreError::shape(
            alloc::format!("Nx{} features", params.in_dim()),
            alloc::format!("{}x{}", features.rows(), features.cols()),
        ));
    }
    if graph.n() != features.rows() || graph.flat().iter().any(|&i| i >= features.rows()) {
        return Err(CoreError::shape(
            alloc::format!("graph over {} rows", features.rows()),
            alloc::format!("graph over {} rows", graph.n()),
        ));
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let feats = g.constant(features.clone());
    let out = params.apply(&mut g, &bound, feats, graph);
    Ok(g.value(out).clone())
}

/// Full backbone as a pure function: one static coordinate-space graph,
/// four EdgeConv blocks, projection to the embedding width.
pub fn dgcnn_forward(cloud: &PointCloud, params: &BackboneParams, store: &ParamStore) -> Result<FeatureMatrix> {
    if cloud.n() < params.cfg.k {
        return Err(CoreError::BadNeighborhood {
            k: params.cfg.k,
            n: cloud.n(),
        });
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let (embed, _) = build_dgcnn(&mut g, &bound, params, cloud)?;
    Ok(g.value(embed).clone())
}

/// Cosine similarity matrix `s_ij = <fx_i, fy_j> / (|fx_i| |fy_j|)` with the
/// denominator clamped at [`COSINE_EPS`].
pub fn cosine_similarity_matrix(fx: &FeatureMatrix, fy: &FeatureMatrix) -> Result<Matrix> {
    if fx.cols() != fy.cols() {
        return Err(CoreError::shape(
            alloc::format!("matching widths, lhs {}", fx.cols()),
            alloc::format!("rhs {}", fy.cols()),
        ));
    }
    let mut g = Graph::new();
    let a = g.constant(fx.clone());
    let b = g.constant(fy.clone());
    let s = build_cosine_similarity(&mut g, a, b);
    Ok(g.value(s).clone())
}
