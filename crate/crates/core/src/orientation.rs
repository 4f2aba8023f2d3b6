//! Orientation estimation: a shared EdgeConv encoder over both clouds, a
//! query-based feature interaction block, an angle-bin classification head,
//! a domain discriminator behind a gradient-reversal hook, and the coarse
//! source alignment it all feeds.
//!
//! The relative z-rotation between source and target is treated as a
//! classification task over `M` equal bins; alignment rotates the source by
//! the negative center angle of the winning bin.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::fx;
use crate::geometry::{knn_indices, rotate_z, PointCloud, ZRotation, TAU};
use crate::nn::{center_indices, BoundParams, ColumnNorm, EdgeConv, LayerNorm, Linear, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::Matrix;
use crate::{CoreError, Result};

/// Log clamp used by the classification and focal losses.
pub const LOSS_LOG_EPS: f64 = 1e-12;

/// Normalization used inside the classification head. Batch statistics are
/// degenerate at batch size one, so per-row normalization is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadNorm {
    Layer,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OemConfig {
    /// Master switch; when off the pipeline skips alignment and both
    /// orientation losses.
    pub enabled: bool,
    /// Neighborhood size for the encoder graphs and the feature interaction.
    pub k: usize,
    /// Number of equal angle bins `M`.
    pub bins: usize,
    /// Focal-loss focusing parameter (`> 1`).
    pub gamma: f64,
    /// Gradient-reversal weight between `p_hat` and the discriminator.
    pub grl_weight: f64,
    /// Feature Interaction Module toggle.
    pub fim: bool,
    /// Domain Adaptation Module (discriminator + focal loss) toggle.
    pub dam: bool,
    /// Encoder EdgeConv output widths; the last is `C1`.
    pub encoder_channels: [usize; 3],
    /// Classification-head hidden widths.
    pub head_channels: [usize; 3],
    /// Per-point discriminator MLP widths.
    pub disc_mlp1: [usize; 3],
    /// Post-pooling discriminator MLP widths.
    pub disc_mlp2: [usize; 3],
    pub head_norm: HeadNorm,
    pub slope: f64,
}

impl Default for OemConfig {
    fn default() -> Self {
        OemConfig {
            enabled: true,
            k: 24,
            bins: 8,
            gamma: 2.0,
            grl_weight: 1.0,
            fim: true,
            dam: true,
            encoder_channels: [64, 128, 256],
            head_channels: [256, 128, 128],
            disc_mlp1: [512, 256, 128],
            disc_mlp2: [256, 128, 256],
            head_norm: HeadNorm::Layer,
            slope: 0.2,
        }
    }
}

impl OemConfig {
    /// Encoder output width `C1`.
    pub fn c1(&self) -> usize {
        self.encoder_channels[2]
    }

    /// Width of `p_hat` (fused features plus their refinement).
    pub fn c2(&self) -> usize {
        2 * self.c1()
    }

    /// Small widths for desk-scale training runs.
    pub fn desk() -> Self {
        OemConfig {
            encoder_channels: [16, 32, 64],
            head_channels: [64, 32, 32],
            disc_mlp1: [128, 64, 32],
            disc_mlp2: [64, 32, 64],
            k: 12,
            ..Default::default()
        }
    }

    /// Tiny widths for finite-difference test instances.
    pub fn micro() -> Self {
        OemConfig {
            encoder_channels: [4, 8, 8],
            head_channels: [8, 8, 8],
            disc_mlp1: [8, 8, 8],
            disc_mlp2: [8, 8, 8],
            k: 4,
            ..Default::default()
        }
    }
}

/// M-bin categorical distribution over the relative z-rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleDistribution {
    probs: Vec<f64>,
}

impl AngleDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::arg("probs", "empty distribution"));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(CoreError::arg("probs", "negative or NaN probability"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::arg(
                "probs",
                alloc::format!("sums to {sum}, expected 1 within 1e-6"),
            ));
        }
        Ok(AngleDistribution { probs })
    }

    /// One-hot distribution on `bin`.
    pub fn one_hot(bin: usize, m: usize) -> Result<Self> {
        if bin >= m {
            return Err(CoreError::arg(
                "bin",
                alloc::format!("bin {bin} out of range for M={m}"),
            ));
        }
        let mut probs = alloc::vec![0.0; m];
        probs[bin] = 1.0;
        Ok(AngleDistribution { probs })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest probability; ties break toward the lower bin.
    pub fn argmax_bin(&self) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &p) in self.probs.iter().enumerate() {
            if p > best.0 {
                best = (p, i);
            }
        }
        best.1
    }
}

/// Discretized rotation label: `bin = floor(angle * M / 2pi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleLabel {
    pub bin: usize,
    pub angle: f64,
}

/// Scalar sigmoid output of the domain discriminator, in the open `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainProbability(f64);

impl DomainProbability {
    pub fn new(d: f64) -> Result<Self> {
        if !(d > 0.0 && d < 1.0) {
            return Err(CoreError::arg("d", alloc::format!("{d} outside (0, 1)")));
        }
        Ok(DomainProbability(d))
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Encoder outputs and fused features for one source/target pair.
#[derive(Clone, Debug)]
pub struct OemFeatures {
    pub p_in_s: Matrix,
    pub p_in_t: Matrix,
    pub p_out: Matrix,
    pub p_hat: Matrix,
}

/// All learnable tensors of the orientation module.
#[derive(Clone, Debug)]
pub struct OemParams {
    pub cfg: OemConfig,
    pub encoder: [EdgeConv; 3],
    pub fim_edge: Linear,
    pub fim_norm: ColumnNorm,
    pub fim_skip: Linear,
    pub refine: EdgeConv,
    pub head: [(Linear, LayerNorm); 3],
    pub head_out: Linear,
    pub disc_mlp1: [(Linear, ColumnNorm); 3],
    pub disc_mlp2: [Linear; 3],
    pub disc_out: Linear,
}

impl OemParams {
    pub fn init(store: &mut ParamStore, rng: &mut SeedRng, cfg: &OemConfig) -> Self {
        let e = cfg.encoder_channels;
        let c1 = cfg.c1();
        let c2 = cfg.c2();
        let encoder = [
            EdgeConv::init(store, rng, "oem.enc1", 3, e[0], cfg.slope),
            EdgeConv::init(store, rng, "oem.enc2", e[0], e[1], cfg.slope),
            EdgeConv::init(store, rng, "oem.enc3", e[1], e[2], cfg.slope),
        ];
        let fim_edge = Linear::init(store, rng, "oem.fim.edge", 2 * (c1 + 3), c1);
        let fim_norm = ColumnNorm::init(store, "oem.fim.norm", c1);
        let fim_skip = Linear::init(store, rng, "oem.fim.skip", c1, c1);
        let refine = EdgeConv::init(store, rng, "oem.refine", c1, c1, cfg.slope);

        let h = cfg.head_channels;
        let head = [
            (
                Linear::init(store, rng, "oem.head.l1", 2 * c2, h[0]),
                LayerNorm::init(store, "oem.head.n1", h[0]),
            ),
            (
                Linear::init(store, rng, "oem.head.l2", h[0], h[1]),
                LayerNorm::init(store, "oem.head.n2", h[1]),
            ),
            (
                Linear::init(store, rng, "oem.head.l3", h[1], h[2]),
                LayerNorm::init(store, "oem.head.n3", h[2]),
            ),
        ];
        let head_out = Linear::init(store, rng, "oem.head.out", h[2], cfg.bins);

        let d1 = cfg.disc_mlp1;
        let disc_mlp1 = [
            (
                Linear::init(store, rng, "oem.disc.m1a", c2, d1[0]),
                ColumnNorm::init(store, "oem.disc.m1a.norm", d1[0]),
            ),
            (
                Linear::init(store, rng, "oem.disc.m1b", d1[0], d1[1]),
                ColumnNorm::init(store, "oem.disc.m1b.norm", d1[1]),
            ),
            (
                Linear::init(store, rng, "oem.disc.m1c", d1[1], d1[2]),
                ColumnNorm::init(store, "oem.disc.m1c.norm", d1[2]),
            ),
        ];
        let d2 = cfg.disc_mlp2;
        let disc_mlp2 = [
            Linear::init(store, rng, "oem.disc.m2a", d1[2], d2[0]),
            Linear::init(store, rng, "oem.disc.m2b", d2[0], d2[1]),
            Linear::init(store, rng, "oem.disc.m2c", d2[1], d2[2]),
        ];
        let disc_out = Linear::init(store, rng, "oem.disc.out", d2[2], 1);

        OemParams {
            cfg: cfg.clone(),
            encoder,
            fim_edge,
            fim_norm,
            fim_skip,
            refine,
            head,
            head_out,
            disc_mlp1,
            disc_mlp2,
            disc_out,
        }
    }
}

/// Tape handles produced by one orientation forward pass.
pub struct OemForward {
    pub p_in_s: NodeId,
    pub p_in_t: NodeId,
    pub p_out: NodeId,
    pub p_hat: NodeId,
    pub angle_probs: NodeId,
}

fn encode_cloud(
    g: &mut Graph,
    bound: &BoundParams,
    oem: &OemParams,
    cloud: &PointCloud,
) -> Result<(NodeId, crate::geometry::KnnGraph)> {
    let graph = knn_indices(cloud, cloud, oem.cfg.k)?;
    let mut h = g.constant(cloud.to_matrix());
    for block in &oem.encoder {
        h = block.apply(g, bound, h, &graph);
    }
    Ok((h, graph))
}

/// Query-based graph convolution: each source point gathers its k nearest
/// target points in feature space; edges carry position-augmented
/// `(p_i, q_i^j - p_i)` pairs; a linear skip keeps the block residual.
#[allow(clippy::too_many_arguments)]
fn build_fim(
    g: &mut Graph,
    bound: &BoundParams,
    oem: &OemParams,
    p_s: NodeId,
    p_t: NodeId,
    coords_s: &PointCloud,
    coords_t: &PointCloud,
    k: usize,
) -> Result<NodeId> {
    let feature_graph = knn_indices(g.value(p_s), g.value(p_t), k)?;
    let cs = g.constant(coords_s.to_matrix());
    let ct = g.constant(coords_t.to_matrix());
    let pa_s = g.concat_cols(p_s, cs);
    let pa_t = g.concat_cols(p_t, ct);
    let n = coords_s.n();
    let centers = g.gather_rows(pa_s, center_indices(n, k));
    let neighbors = g.gather_rows(pa_t, feature_graph.flat().to_vec());
    let rel = g.sub(neighbors, centers);
    let edges = g.concat_cols(centers, rel);
    let mapped = oem.fim_edge.apply(g, bound, edges);
    let normed = oem.fim_norm.apply(g, bound, mapped);
    let pooled = g.group_max_pool(normed, k);
    let act = g.relu(pooled);
    let skip = oem.fim_skip.apply(g, bound, p_s);
    Ok(g.add(act, skip))
}

fn build_head(g: &mut Graph, bound: &BoundParams, oem: &OemParams, p_hat: NodeId) -> NodeId {
    let mx = g.col_max(p_hat);
    let me = g.col_mean(p_hat);
    let mut h = g.concat_cols(mx, me);
    for (lin, norm) in &oem.head {
        h = lin.apply(g, bound, h);
        if oem.cfg.head_norm == HeadNorm::Layer {
            h = norm.apply(g, bound, h);
        }
        h = g.relu(h);
    }
    oem.head_out.apply(g, bound, h)
}

/// Full orientation forward: shared encoder on both clouds, optional feature
/// interaction, EdgeConv refinement, pooled classification head.
pub fn build_oem_forward(
    g: &mut Graph,
    bound: &BoundParams,
    oem: &OemParams,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<OemForward> {
    let (p_in_s, graph_s) = encode_cloud(g, bound, oem, source)?;
    let (p_in_t, _) = encode_cloud(g, bound, oem, target)?;
    let p_out = if oem.cfg.fim {
        build_fim(g, bound, oem, p_in_s, p_in_t, source, target, oem.cfg.k)?
    } else {
        p_in_s
    };
    let refined = oem.refine.apply(g, bound, p_out, &graph_s);
    let p_hat = g.concat_cols(p_out, refined);
    let logits = build_head(g, bound, oem, p_hat);
    let angle_probs = g.softmax_rows(logits);
    Ok(OemForward {
        p_in_s,
        p_in_t,
        p_out,
        p_hat,
        angle_probs,
    })
}

/// PointNet-style discriminator over `p_hat`; `grl_weight` of `Some(w)`
/// inserts a gradient-reversal hook so the upstream features are trained
/// adversarially while the discriminator itself learns normally.
pub fn build_discriminator(
    g: &mut Graph,
    bound: &BoundParams,
    oem: &OemParams,
    p_hat: NodeId,
    grl_weight: Option<f64>,
) -> NodeId {
    let mut h = match grl_weight {
        Some(w) => g.grl(p_hat, w),
        None => p_hat,
    };
    for (lin, norm) in &oem.disc_mlp1 {
        h = lin.apply(g, bound, h);
        h = norm.apply(g, bound, h);
        h = g.leaky_relu(h, oem.cfg.slope);
    }
    let mut pooled = g.col_max(h);
    for lin in &oem.disc_mlp2 {
        pooled = lin.apply(g, bound, pooled);
        pooled = g.leaky_relu(pooled, oem.cfg.slope);
    }
    let out = oem.disc_out.apply(g, bound, pooled);
    g.sigmoid(out)
}

/// Tape node for the focal domain loss of a single sample.
pub fn build_domain_loss(g: &mut Graph, d: NodeId, is_real: bool, gamma: f64) -> NodeId {
    if is_real {
        // -(1-d)^gamma * ln(d)
        let om = g.one_minus(d);
        let pw = g.pow_const(om, gamma);
        let ln = g.ln_clamped(d, LOSS_LOG_EPS);
        let prod = g.mul(pw, ln);
        g.scale(prod, -1.0)
    } else {
        // -d^gamma * ln(1-d)
        let pw = g.pow_const(d, gamma);
        let om = g.one_minus(d);
        let ln = g.ln_clamped(om, LOSS_LOG_EPS);
        let prod = g.mul(pw, ln);
        g.scale(prod, -1.0)
    }
}

// ---------------------------------------------------------------------------
// Pure (value-only) entry points.
// ---------------------------------------------------------------------------

/// Shared-weight encoding of both clouds: three EdgeConv blocks over a
/// coordinate-space graph of size `k`.
pub fn oem_encode(
    source: &PointCloud,
    target: &PointCloud,
    oem: &OemParams,
    store: &ParamStore,
) -> Result<(Matrix, Matrix)> {
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let (s, _) = encode_cloud(&mut g, &bound, oem, source)?;
    let (t, _) = encode_cloud(&mut g, &bound, oem, target)?;
    Ok((g.value(s).clone(), g.value(t).clone()))
}

/// Feature interaction as a pure function of encoder outputs and coordinates.
pub fn feature_interaction(
    p_s: &Matrix,
    p_t: &Matrix,
    coords_s: &PointCloud,
    coords_t: &PointCloud,
    k: usize,
    oem: &OemParams,
    store: &ParamStore,
) -> Result<Matrix> {
    if !p_s.same_shape(p_t) {
        return Err(CoreError::shape(
            alloc::format!("{}x{}", p_s.rows(), p_s.cols()),
            alloc::format!("{}x{}", p_t.rows(), p_t.cols()),
        ));
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let ps = g.constant(p_s.clone());
    let pt = g.constant(p_t.clone());
    let out = build_fim(&mut g, &bound, oem, ps, pt, coords_s, coords_t, k)?;
    Ok(g.value(out).clone())
}

/// EdgeConv refinement of the fused features concatenated back onto them.
pub fn refine_and_concat(
    p_out: &Matrix,
    source: &PointCloud,
    oem: &OemParams,
    store: &ParamStore,
) -> Result<Matrix> {
    let graph = knn_indices(source, source, oem.cfg.k)?;
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let p = g.constant(p_out.clone());
    let refined = oem.refine.apply(&mut g, &bound, p, &graph);
    let cat = g.concat_cols(p, refined);
    Ok(g.value(cat).clone())
}

/// Encoder + interaction + refinement, bundled.
pub fn oem_features(
    source: &PointCloud,
    target: &PointCloud,
    oem: &OemParams,
    store: &ParamStore,
) -> Result<OemFeatures> {
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let fwd = build_oem_forward(&mut g, &bound, oem, source, target)?;
    Ok(OemFeatures {
        p_in_s: g.value(fwd.p_in_s).clone(),
        p_in_t: g.value(fwd.p_in_t).clone(),
        p_out: g.value(fwd.p_out).clone(),
        p_hat: g.value(fwd.p_hat).clone(),
    })
}

/// Pooled classification head over `p_hat`, softmaxed into bin probabilities.
pub fn classify_rotation(
    p_hat: &Matrix,
    oem: &OemParams,
    store: &ParamStore,
) -> Result<AngleDistribution> {
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let p = g.constant(p_hat.clone());
    let logits = build_head(&mut g, &bound, oem, p);
    let probs = g.softmax_rows(logits);
    AngleDistribution::new(g.value(probs).row(0).to_vec())
}

/// Discriminator probability that `p_hat` comes from a real (cross-shape) pair.
pub fn discriminate_domain(
    p_hat: &Matrix,
    oem: &OemParams,
    store: &ParamStore,
) -> Result<DomainProbability> {
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, store);
    let p = g.constant(p_hat.clone());
    let d = build_discriminator(&mut g, &bound, oem, p, None);
    DomainProbability::new(g.value(d).item())
}

/// `bin = floor(angle * M / 2pi)` for `angle` in `[0, 2pi)`.
pub fn angle_to_bin(angle: f64, m: usize) -> Result<AngleLabel> {
    if m == 0 {
        return Err(CoreError::arg("m", "zero bins"));
    }
    if !(0.0..TAU).contains(&angle) {
        return Err(CoreError::arg(
            "angle",
            alloc::format!("{angle} outside [0, 2pi)"),
        ));
    }
    let bin = (fx::floor(angle * m as f64 / TAU) as usize).min(m - 1);
    Ok(AngleLabel { bin, angle })
}

/// Center angle of a bin: `(bin + 0.5) * 2pi / M`.
pub fn bin_to_angle(bin: usize, m: usize) -> Result<f64> {
    if m == 0 || bin >= m {
        return Err(CoreError::arg(
            "bin",
            alloc::format!("bin {bin} invalid for M={m}"),
        ));
    }
    Ok((bin as f64 + 0.5) * TAU / m as f64)
}

/// Cross-entropy against a one-hot label, log clamped at [`LOSS_LOG_EPS`].
pub fn angle_loss(pred: &AngleDistribution, label: &AngleLabel) -> Result<f64> {
    if label.bin >= pred.m() {
        return Err(CoreError::arg(
            "label",
            alloc::format!("bin {} out of range for M={}", label.bin, pred.m()),
        ));
    }
    Ok(-fx::ln(pred.probs()[label.bin].max(LOSS_LOG_EPS)))
}

/// Two-class focal loss. The real class pulls `d` toward 1, the
/// rotation-augmented class toward 0; both sides are focal-weighted.
pub fn domain_loss(d: DomainProbability, is_real: bool, gamma: f64) -> Result<f64> {
    if !(gamma > 1.0) {
        return Err(CoreError::arg("gamma", alloc::format!("{gamma} must be > 1")));
    }
    let d = d.value();
    Ok(if is_real {
        -fx::powf(1.0 - d, gamma) * fx::ln(d.max(LOSS_LOG_EPS))
    } else {
        -fx::powf(d, gamma) * fx::ln((1.0 - d).max(LOSS_LOG_EPS))
    })
}

/// Rotates the source by the negative center angle of the argmax bin.
pub fn align_source(source: &PointCloud, pred: &AngleDistribution) -> PointCloud {
    let bin = pred.argmax_bin();
    let theta = bin_to_angle(bin, pred.m()).expect("argmax bin is valid by construction");
    rotate_z(source, ZRotation::from_radians(-theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist3;

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

    fn paper_oem(seed: u64) -> (ParamStore, OemParams) {
        let mut store = ParamStore::new();
        let oem = OemParams::init(&mut store, &mut SeedRng::new(seed), &OemConfig::default());
        (store, oem)
    }

    fn micro_oem(seed: u64) -> (ParamStore, OemParams) {
        let mut store = ParamStore::new();
        let oem = OemParams::init(&mut store, &mut SeedRng::new(seed), &OemConfig::micro());
        (store, oem)
    }

    #[test]
    fn config_defaults_match_reported_wiring() {
        let cfg = OemConfig::default();
        assert_eq!(cfg.encoder_channels, [64, 128, 256]);
        assert_eq!(cfg.k, 24);
        assert_eq!(cfg.bins, 8);
        assert_eq!(cfg.disc_mlp1, [512, 256, 128]);
        assert_eq!(cfg.disc_mlp2, [256, 128, 256]);
        assert_eq!(cfg.head_channels, [256, 128, 128]);
        assert_eq!(cfg.slope, 0.2);
        assert_eq!(cfg.gamma, 2.0);
        assert_eq!(cfg.grl_weight, 1.0);
    }

    #[test]
    fn oem_encode_default_width_256() {
        let (store, oem) = paper_oem(1);
        let s = random_cloud(30, 2);
        let t = random_cloud(30, 3);
        let (ps, pt) = oem_encode(&s, &t, &oem, &store).unwrap();
        assert_eq!(ps.cols(), 256);
        assert_eq!(pt.cols(), 256);
        assert_eq!(ps.rows(), 30);
    }

    #[test]
    fn oem_encode_shares_weights() {
        let (store, oem) = paper_oem(4);
        let c = random_cloud(26, 5);
        let (ps, pt) = oem_encode(&c, &c, &oem, &store).unwrap();
        assert_eq!(ps, pt);
    }

    #[test]
    fn oem_encode_rejects_tiny_clouds() {
        let (store, oem) = paper_oem(6);
        let c = random_cloud(10, 7);
        assert!(oem_encode(&c, &c, &oem, &store).is_err());
    }

    #[test]
    fn fim_edge_tensor_width() {
        let cfg = OemConfig::default();
        let mut store = ParamStore::new();
        let oem = OemParams::init(&mut store, &mut SeedRng::new(0), &cfg);
        assert_eq!(oem.fim_edge.in_dim, 2 * (cfg.c1() + 3));
    }

    #[test]
    fn fim_zero_aggregation_reduces_to_skip() {
        let (mut store, oem) = micro_oem(8);
        store.get_mut(oem.fim_edge.w).fill(0.0);
        store.get_mut(oem.fim_edge.b).fill(0.0);
        let s = random_cloud(10, 9);
        let t = random_cloud(10, 10);
        let c1 = oem.cfg.c1();
        let mut rng = SeedRng::new(11);
        let ps = Matrix::from_fn(10, c1, |_, _| rng.uniform_range(-1.0, 1.0));
        let pt = Matrix::from_fn(10, c1, |_, _| rng.uniform_range(-1.0, 1.0));
        let out = feature_interaction(&ps, &pt, &s, &t, 4, &oem, &store).unwrap();
        // relu(maxpool(0)) = 0, so the output is exactly the linear skip.
        let skip = {
            let w = store.get(oem.fim_skip.w);
            let b = store.get(oem.fim_skip.b);
            let mm = ps.matmul(w);
            Matrix::from_fn(mm.rows(), mm.cols(), |r, c| mm.at(r, c) + b.at(0, c))
        };
        assert!(out.max_abs_diff(&skip) < 1e-12);
    }

    #[test]
    fn fim_feature_knn_matches_bruteforce() {
        let mut rng = SeedRng::new(12);
        let q = Matrix::from_fn(16, 8, |_, _| rng.uniform_range(-1.0, 1.0));
        let r = Matrix::from_fn(16, 8, |_, _| rng.uniform_range(-1.0, 1.0));
        let g = knn_indices(&q, &r, 5).unwrap();
        for i in 0..16 {
            let mut dists: Vec<(f64, usize)> = (0..16)
                .map(|j| {
                    let d: f64 = (0..8)
                        .map(|c| (q.at(i, c) - r.at(j, c)) * (q.at(i, c) - r.at(j, c)))
                        .sum();
                    (d, j)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = dists[..5].iter().map(|&(_, j)| j).collect();
            assert_eq!(g.row(i), want.as_slice());
        }
    }

    #[test]
    fn fim_rejects_oversized_k() {
        let (store, oem) = micro_oem(40);
        let s = random_cloud(6, 41);
        let t = random_cloud(6, 42);
        let c1 = oem.cfg.c1();
        let ps = Matrix::zeros(6, c1);
        let pt = Matrix::zeros(6, c1);
        assert!(feature_interaction(&ps, &pt, &s, &t, 7, &oem, &store).is_err());
    }

    #[test]
    fn refine_and_concat_width_is_double() {
        let (store, oem) = paper_oem(13);
        let s = random_cloud(30, 14);
        let mut rng = SeedRng::new(15);
        let p_out = Matrix::from_fn(30, 256, |_, _| rng.uniform_range(-1.0, 1.0));
        let p_hat = refine_and_concat(&p_out, &s, &oem, &store).unwrap();
        assert_eq!(p_hat.cols(), 512);
        let again = refine_and_concat(&p_out, &s, &oem, &store).unwrap();
        assert_eq!(p_hat, again);
    }

    #[test]
    fn refine_concat_gradient_reaches_both_branches() {
        // The loss reads only the refined half of p_hat, yet the gradient
        // w.r.t. p_out must be nonzero (refine branch); a loss on the raw
        // half sees the identity gradient (concat branch).
        let (store, oem) = micro_oem(16);
        let s = random_cloud(8, 17);
        let graph = knn_indices(&s, &s, oem.cfg.k).unwrap();
        let mut rng = SeedRng::new(18);
        let c1 = oem.cfg.c1();
        let p0 = Matrix::from_fn(8, c1, |_, _| rng.uniform_range(-1.0, 1.0));

        let eval = |p: &Matrix, half: usize| -> f64 {
            let mut g = Graph::new();
            let bound = BoundParams::bind_frozen(&mut g, &store);
            let pn = g.constant(p.clone());
            let refined = oem.refine.apply(&mut g, &bound, pn, &graph);
            let cat = g.concat_cols(pn, refined);
            let v = g.value(cat);
            (0..v.rows())
                .map(|r| (0..c1).map(|c| v.at(r, half * c1 + c)).sum::<f64>())
                .sum()
        };

        let mut g = Graph::new();
        let bound = BoundParams::bind_frozen(&mut g, &store);
        let pn = g.param(&p0);
        let refined = oem.refine.apply(&mut g, &bound, pn, &graph);
        let cat = g.concat_cols(pn, refined);
        let mask = Matrix::from_fn(8, 2 * c1, |_, c| if c >= c1 { 1.0 } else { 0.0 });
        let maskn = g.constant(mask);
        let masked = g.mul(cat, maskn);
        let loss = g.sum_entries(masked);
        let grads = g.backward(loss);
        let analytic = grads.get(pn).unwrap().clone();
        assert!(analytic.frob_norm() > 1e-6, "refine branch carries gradient");

        let step = 1e-6;
        let mut probe = p0.clone();
        *probe.at_mut(2, 1) += step;
        let plus = eval(&probe, 1);
        *probe.at_mut(2, 1) -= 2.0 * step;
        let minus = eval(&probe, 1);
        let fd = (plus - minus) / (2.0 * step);
        assert!(
            (fd - analytic.at(2, 1)).abs() < 1e-4 * fd.abs().max(1.0),
            "fd {fd} vs analytic {}",
            analytic.at(2, 1)
        );

        // Raw-half loss: gradient of sum over the p_out copy is exactly 1.
        let raw = eval(&p0, 0);
        let mut probe2 = p0.clone();
        *probe2.at_mut(3, 0) += step;
        let raw_plus = eval(&probe2, 0);
        assert!(((raw_plus - raw) / step - 1.0).abs() < 1e-3);
    }

    #[test]
    fn classify_rotation_sums_to_one_and_bins_span_45_degrees() {
        let (store, oem) = micro_oem(19);
        assert_eq!(oem.cfg.bins, 8);
        let width = bin_to_angle(1, 8).unwrap() - bin_to_angle(0, 8).unwrap();
        assert!((width - TAU / 8.0).abs() < 1e-15);
        let mut rng = SeedRng::new(20);
        let p_hat = Matrix::from_fn(12, oem.cfg.c2(), |_, _| rng.uniform_range(-1.0, 1.0));
        let dist = classify_rotation(&p_hat, &oem, &store).unwrap();
        assert_eq!(dist.m(), 8);
        let sum: f64 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classify_rotation_permutation_invariant() {
        let (store, oem) = micro_oem(21);
        let mut rng = SeedRng::new(22);
        let p_hat = Matrix::from_fn(14, oem.cfg.c2(), |_, _| rng.uniform_range(-1.0, 1.0));
        let perm = SeedRng::new(23).permutation(14);
        let permuted = Matrix::from_fn(14, p_hat.cols(), |r, c| p_hat.at(perm[r], c));
        let a = classify_rotation(&p_hat, &oem, &store).unwrap();
        let b = classify_rotation(&permuted, &oem, &store).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminator_open_interval_and_permutation_invariant() {
        let (store, oem) = micro_oem(24);
        let mut rng = SeedRng::new(25);
        let p_hat = Matrix::from_fn(10, oem.cfg.c2(), |_, _| rng.uniform_range(-1.0, 1.0));
        let d = discriminate_domain(&p_hat, &oem, &store).unwrap();
        assert!(d.value() > 0.0 && d.value() < 1.0);
        let perm = SeedRng::new(26).permutation(10);
        let permuted = Matrix::from_fn(10, p_hat.cols(), |r, c| p_hat.at(perm[r], c));
        let dp = discriminate_domain(&permuted, &oem, &store).unwrap();
        assert!((d.value() - dp.value()).abs() < 1e-12);
    }

    #[test]
    fn angle_bin_edges() {
        assert_eq!(angle_to_bin(0.0, 8).unwrap().bin, 0);
        assert_eq!(angle_to_bin(core::f64::consts::PI, 8).unwrap().bin, 4);
        assert_eq!(angle_to_bin(TAU - 1e-9, 8).unwrap().bin, 7);
        assert!(angle_to_bin(TAU, 8).is_err());
        assert!(angle_to_bin(-0.1, 8).is_err());
    }

    #[test]
    fn bin_centers() {
        assert!((bin_to_angle(0, 8).unwrap() - TAU / 16.0).abs() < 1e-15);
        assert!((bin_to_angle(2, 4).unwrap() - 5.0 * core::f64::consts::PI / 4.0).abs() < 1e-15);
        assert!(bin_to_angle(8, 8).is_err());
        for b in 0..8 {
            let angle = bin_to_angle(b, 8).unwrap();
            assert_eq!(angle_to_bin(angle, 8).unwrap().bin, b);
        }
    }

    #[test]
    fn angle_loss_cases() {
        let label = AngleLabel {
            bin: 3,
            angle: bin_to_angle(3, 8).unwrap(),
        };
        let one_hot = AngleDistribution::one_hot(3, 8).unwrap();
        assert_eq!(angle_loss(&one_hot, &label).unwrap(), 0.0);

        let uniform = AngleDistribution::new(alloc::vec![0.125; 8]).unwrap();
        let loss = angle_loss(&uniform, &label).unwrap();
        assert!((loss - (8.0f64).ln()).abs() < 1e-12, "uniform loss {loss}");

        // Only the label entry matters.
        let a = AngleDistribution::new(alloc::vec![0.5, 0.2, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = AngleDistribution::new(alloc::vec![0.0, 0.1, 0.2, 0.3, 0.15, 0.05, 0.1, 0.1]).unwrap();
        let la = angle_loss(&a, &AngleLabel { bin: 3, angle: 0.0 }).unwrap();
        let lb = angle_loss(&b, &AngleLabel { bin: 3, angle: 0.0 }).unwrap();
        assert!((la - lb).abs() < 1e-15);
    }

    #[test]
    fn angle_loss_positive_off_label() {
        for seed in 0..20 {
            let mut rng = SeedRng::new(seed);
            let raw: Vec<f64> = (0..8).map(|_| rng.uniform_range(0.01, 1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
            let dist = AngleDistribution::new(probs).unwrap();
            let loss = angle_loss(&dist, &AngleLabel { bin: 2, angle: 0.0 }).unwrap();
            assert!(loss > 0.0);
        }
    }

    #[test]
    fn domain_loss_cases() {
        let d = DomainProbability::new(0.5).unwrap();
        let loss = domain_loss(d, true, 2.0).unwrap();
        assert!((loss - 0.25 * (2.0f64).ln()).abs() < 1e-12);

        let confident_real = DomainProbability::new(1.0 - 1e-9).unwrap();
        assert!(domain_loss(confident_real, true, 2.0).unwrap() < 1e-15);

        let confident_fake = DomainProbability::new(1e-9).unwrap();
        assert!(domain_loss(confident_fake, false, 2.0).unwrap() < 1e-15);

        assert!(domain_loss(d, true, 1.0).is_err());
        assert!(domain_loss(d, true, 0.5).is_err());
    }

    #[test]
    fn focal_strictly_below_plain_cross_entropy() {
        for i in 1..100 {
            let d = i as f64 / 100.0;
            let focal = domain_loss(DomainProbability::new(d).unwrap(), true, 2.0).unwrap();
            let plain = -d.ln();
            assert!(focal < plain, "focal {focal} !< ce {plain} at d={d}");
        }
    }

    #[test]
    fn domain_probability_rejects_boundary() {
        assert!(DomainProbability::new(0.0).is_err());
        assert!(DomainProbability::new(1.0).is_err());
        assert!(DomainProbability::new(0.5).is_ok());
    }

    #[test]
    fn align_with_true_bin_leaves_residual_under_half_bin() {
        let m = 8;
        let x = random_cloud(24, 27);
        for bin in 0..m {
            let theta = bin_to_angle(bin, m).unwrap() + 0.1;
            let theta = if theta >= TAU { theta - TAU } else { theta };
            let label_bin = angle_to_bin(theta, m).unwrap().bin;
            let rotated = rotate_z(&x, ZRotation::from_radians(theta));
            let pred = AngleDistribution::one_hot(label_bin, m).unwrap();
            let aligned = align_source(&rotated, &pred);
            let residual = theta - bin_to_angle(label_bin, m).unwrap();
            assert!(residual.abs() <= TAU / (2.0 * m as f64) + 1e-12);
            let expect = rotate_z(&x, ZRotation::from_radians(residual));
            for i in 0..x.n() {
                assert!(dist3(aligned.point(i), expect.point(i)) < 1e-9);
            }
        }
    }

    #[test]
    fn align_ties_break_to_lower_bin() {
        let dist = AngleDistribution::new(alloc::vec![0.25; 4]).unwrap();
        assert_eq!(dist.argmax_bin(), 0);
    }

    #[test]
    fn angle_distribution_validates() {
        assert!(AngleDistribution::new(alloc::vec![0.5, 0.6]).is_err());
        assert!(AngleDistribution::new(alloc::vec![-0.1, 1.1]).is_err());
        assert!(AngleDistribution::new(alloc::vec![]).is_err());
        assert!(AngleDistribution::new(alloc::vec![0.25; 4]).is_ok());
    }
}
