//! The full correspondence model: backbone plus orientation module over one
//! parameter store, with the shared pair-forward used by the teacher branch,
//! the student branch, and inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{build_cosine_similarity, build_dgcnn, BackboneConfig, BackboneParams};
use crate::geometry::PointCloud;
use crate::nn::{BoundParams, ParamStore};
use crate::orientation::{
    align_source, build_oem_forward, AngleDistribution, OemConfig, OemForward, OemParams,
};
use crate::rng::SeedRng;
use crate::tensor::Matrix;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub oem: OemConfig,
    /// Translate each input cloud to its centroid before encoding. Rotation
    /// about the z-axis commutes with centering, so alignment semantics are
    /// unchanged while the networks become translation invariant.
    pub center_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            oem: OemConfig::default(),
            center_inputs: true,
        }
    }
}

impl ModelConfig {
    /// Small widths for desk-scale training runs.
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            oem: OemConfig::desk(),
            ..Default::default()
        }
    }

    /// Tiny widths for finite-difference test instances.
    pub fn micro() -> Self {
        ModelConfig {
            backbone: BackboneConfig::micro(),
            oem: OemConfig::micro(),
            ..Default::default()
        }
    }
}

/// One parameter set (student or teacher) with its architecture handles.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub oem: OemParams,
}

impl Model {
    /// Seeded initialization; identical (cfg, seed) gives identical tensors.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Model {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed);
        let backbone = BackboneParams::init(&mut store, &mut rng, &cfg.backbone);
        let oem = OemParams::init(&mut store, &mut rng, &cfg.oem);
        Model {
            cfg: cfg.clone(),
            store,
            backbone,
            oem,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams::bind(g, &self.store)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams::bind_frozen(g, &self.store)
    }
}

/// Tape handles for one aligned pair pass.
pub struct PairForward {
    /// Source after coarse orientation alignment (the backbone input).
    pub aligned_source: PointCloud,
    /// Orientation forward on (source, target), when the module is enabled.
    pub oem: Option<OemForward>,
    pub feat_src: NodeId,
    pub feat_tgt: NodeId,
    pub sim_xy: NodeId,
    pub sim_xx: NodeId,
    pub sim_yy: NodeId,
}

/// Aligns the source via the orientation module (argmax bin, no gradient
/// through the rotation), embeds both clouds, and produces the cross- and
/// self-similarity matrices.
pub fn build_pair_forward(
    g: &mut Graph,
    bound: &BoundParams,
    model: &Model,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<PairForward> {
    let (src, tgt) = if model.cfg.center_inputs {
        (source.centered(), target.centered())
    } else {
        (source.clone(), target.clone())
    };
    let (aligned_source, aligned_centered, oem) = if model.cfg.oem.enabled {
        let fwd = build_oem_forward(g, bound, &model.oem, &src, &tgt)?;
        let dist = AngleDistribution::new(g.value(fwd.angle_probs).row(0).to_vec())?;
        (
            align_source(source, &dist),
            align_source(&src, &dist),
            Some(fwd),
        )
    } else {
        (source.clone(), src.clone(), None)
    };
    let (feat_src, _) = build_dgcnn(g, bound, &model.backbone, &aligned_centered)?;
    let (feat_tgt, _) = build_dgcnn(g, bound, &model.backbone, &tgt)?;
    let sim_xy = build_cosine_similarity(g, feat_src, feat_tgt);
    let sim_xx = build_cosine_similarity(g, feat_src, feat_src);
    let sim_yy = build_cosine_similarity(g, feat_tgt, feat_tgt);
    Ok(PairForward {
        aligned_source,
        oem,
        feat_src,
        feat_tgt,
        sim_xy,
        sim_xx,
        sim_yy,
    })
}

/// Value-only outputs for inference and evaluation.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub similarity: Matrix,
    pub aligned_source: PointCloud,
    pub angle: Option<AngleDistribution>,
}

impl Model {
    /// Runs the frozen model on a raw pair and returns the cross-similarity.
    pub fn infer_pair(&self, source: &PointCloud, target: &PointCloud) -> Result<InferenceOutput> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let fwd = build_pair_forward(&mut g, &bound, self, source, target)?;
        let angle = match &fwd.oem {
            Some(oemf) => Some(AngleDistribution::new(
                g.value(oemf.angle_probs).row(0).to_vec(),
            )?),
            None => None,
        };
        Ok(InferenceOutput {
            similarity: g.value(fwd.sim_xy).clone(),
            aligned_source: fwd.aligned_source,
            angle,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = SeedRng::new(seed);
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    [
                        rng.uniform_range(-1.0, 1.0),
                        rng.uniform_range(-1.0, 1.0),
                        rng.uniform_range(-1.0, 1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::micro();
        let a = Model::init(&cfg, 11);
        let b = Model::init(&cfg, 11);
        assert!(a.store.same_layout(&b.store));
        assert_eq!(a.store.mats(), b.store.mats());
        let c = Model::init(&cfg, 12);
        assert_ne!(a.store.mats(), c.store.mats());
    }

    #[test]
    fn pair_forward_shapes() {
        let model = Model::init(&ModelConfig::micro(), 3);
        let x = random_cloud(12, 4);
        let y = random_cloud(12, 5);
        let out = model.infer_pair(&x, &y).unwrap();
        assert_eq!(out.similarity.rows(), 12);
        assert_eq!(out.similarity.cols(), 12);
        assert!(out.angle.is_some());
        assert_eq!(out.aligned_source.n(), 12);
    }

    #[test]
    fn disabled_oem_skips_alignment() {
        let mut cfg = ModelConfig::micro();
        cfg.oem.enabled = false;
        let model = Model::init(&cfg, 6);
        let x = random_cloud(10, 7);
        let y = random_cloud(10, 8);
        let out = model.infer_pair(&x, &y).unwrap();
        assert!(out.angle.is_none());
        assert_eq!(out.aligned_source, x);
    }
}
