//! Synthetic articulated shape pairs with exact ground-truth correspondence.
//!
//! Templates are stick-figure assemblies: a rigid body (torso cylinder, head
//! and nose blobs) plus four limb cylinders articulated at shoulder and hip
//! joints. Deformation rotates each limb about its joint and leans the whole
//! figure, point-wise, so point identity survives every transform and the
//! ground truth is exact by construction. The left/right limb symmetry
//! deliberately reproduces the symmetry confusions that make orientation
//! estimation necessary; the forward-facing nose keeps the canonical shape
//! chiral so a rotation label is well defined. Coordinates are centimeters.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{rotate_z, GroundTruthMap, PointCloud, ZRotation, TAU};
use crate::orientation::bin_to_angle;
use crate::rng::{derive_seed, SeedRng};
use crate::{CoreError, Result};

/// Segment labels: 0 body, 1 left arm, 2 right arm, 3 left leg, 4 right leg.
pub const SEGMENTS: usize = 5;

/// A source/target cloud pair, optionally with exact ground truth and the
/// rotation label applied to the source.
#[derive(Clone, Debug)]
pub struct ShapePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: Option<GroundTruthMap>,
    pub theta: Option<f64>,
}

/// Canonical articulated template, reproducible from `(id, points, seed)`.
#[derive(Clone, Debug)]
pub struct ShapeTemplate {
    pub id: u64,
    pub cloud: PointCloud,
    pub labels: Vec<u8>,
    joints: [[f64; 3]; 4],
    pelvis: [f64; 3],
}

/// Hard deformation limits (radians / scale factors).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformLimits {
    pub max_limb_pitch: f64,
    pub max_limb_roll: f64,
    pub max_torso_lean: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for DeformLimits {
    fn default() -> Self {
        DeformLimits {
            max_limb_pitch: core::f64::consts::FRAC_PI_3,
            max_limb_roll: core::f64::consts::FRAC_PI_6,
            max_torso_lean: core::f64::consts::FRAC_PI_8 / 1.5,
            scale_lo: 0.9,
            scale_hi: 1.1,
        }
    }
}

/// Per-instance pose: limb rotations about their joints, a whole-body lean,
/// and a global scale. Applied point-wise; a bijection on indices.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    pub limb_pitch: [f64; 4],
    pub limb_roll: [f64; 4],
    pub torso_lean: f64,
    pub scale: f64,
}

impl DeformParams {
    pub fn identity() -> Self {
        DeformParams {
            limb_pitch: [0.0; 4],
            limb_roll: [0.0; 4],
            torso_lean: 0.0,
            scale: 1.0,
        }
    }

    pub fn sample(rng: &mut SeedRng, limits: &DeformLimits) -> Self {
        DeformParams {
            limb_pitch: core::array::from_fn(|_| rng.uniform_symmetric(limits.max_limb_pitch)),
            limb_roll: core::array::from_fn(|_| rng.uniform_symmetric(limits.max_limb_roll)),
            torso_lean: rng.uniform_symmetric(limits.max_torso_lean),
            scale: rng.uniform_range(limits.scale_lo, limits.scale_hi),
        }
    }

    pub fn validate(&self, limits: &DeformLimits) -> Result<()> {
        let ok = self
            .limb_pitch
            .iter()
            .all(|a| a.abs() <= limits.max_limb_pitch)
            && self.limb_roll.iter().all(|a| a.abs() <= limits.max_limb_roll)
            && self.torso_lean.abs() <= limits.max_torso_lean
            && self.scale >= limits.scale_lo
            && self.scale <= limits.scale_hi;
        if ok {
            Ok(())
        } else {
            Err(CoreError::arg("deform", "pose outside configured limits"))
        }
    }
}

fn rot_x(a: f64, p: [f64; 3]) -> [f64; 3] {
    let (s, c) = (crate::fx::sin(a), crate::fx::cos(a));
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

fn rot_y(a: f64, p: [f64; 3]) -> [f64; 3] {
    let (s, c) = (crate::fx::sin(a), crate::fx::cos(a));
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

impl ShapeTemplate {
    /// Builds template `id` with `points` samples. Proportions vary with the
    /// id so different ids are genuinely different bodies.
    pub fn generate(id: u64, points: usize, seed: u64) -> Result<ShapeTemplate> {
        if points < 32 {
            return Err(CoreError::arg("points", "template needs at least 32 points"));
        }
        let mut shape_rng = SeedRng::new(derive_seed(seed, id, 0x54a9e));
        let torso_r = 0.11 * shape_rng.uniform_range(0.85, 1.2);
        let torso_top = 1.48 * shape_rng.uniform_range(0.95, 1.05);
        let head_r = shape_rng.uniform_range(0.075, 0.105);
        let shoulder_x = 0.14 * shape_rng.uniform_range(0.9, 1.15);
        let arm_len = 0.46 * shape_rng.uniform_range(0.85, 1.15);
        let arm_r = 0.045 * shape_rng.uniform_range(0.85, 1.2);
        let hip_x = 0.08 * shape_rng.uniform_range(0.9, 1.15);
        let leg_len = 0.80 * shape_rng.uniform_range(0.85, 1.1);
        let leg_r = 0.06 * shape_rng.uniform_range(0.85, 1.2);
        let pelvis_z = 0.90;

        let shoulder_z = torso_top - 0.04;
        let head_c = [0.0, 0.02, torso_top + head_r + 0.025];
        let nose_c = [0.0, head_r + 0.03, torso_top + head_r + 0.015];
        let joints = [
            [-shoulder_x, 0.0, shoulder_z],
            [shoulder_x, 0.0, shoulder_z],
            [-hip_x, 0.0, pelvis_z],
            [hip_x, 0.0, pelvis_z],
        ];

        // Point budget per part: body 45% (torso 30, head 12, nose 3),
        // arms 2 x 12.5%, legs 2 x 15%.
        let n_torso = points * 30 / 100;
        let n_head = points * 12 / 100;
        let n_nose = points * 3 / 100;
        let n_arm = points * 125 / 1000;
        let n_leg = points * 15 / 100;
        let used = n_torso + n_head + n_nose + 2 * n_arm + 2 * n_leg;
        let n_torso = n_torso + points - used; // absorb rounding into the torso

        let mut rng = SeedRng::new(derive_seed(seed, id, 0x9a31));
        let mut pts: Vec<[f64; 3]> = Vec::with_capacity(points);
        let mut labels: Vec<u8> = Vec::with_capacity(points);

        let cylinder = |n: usize,
                            center_x: f64,
                            center_y: f64,
                            z_lo: f64,
                            z_hi: f64,
                            r: f64,
                            label: u8,
                            pts: &mut Vec<[f64; 3]>,
                            labels: &mut Vec<u8>,
                            rng: &mut SeedRng| {
            for _ in 0..n {
                let z = rng.uniform_range(z_lo, z_hi);
                let phi = rng.uniform_range(0.0, TAU);
                pts.push([
                    center_x + r * crate::fx::cos(phi),
                    center_y + r * crate::fx::sin(phi),
                    z,
                ]);
                labels.push(label);
            }
        };
        let blob = |n: usize,
                        c: [f64; 3],
                        radii: [f64; 3],
                        label: u8,
                        pts: &mut Vec<[f64; 3]>,
                        labels: &mut Vec<u8>,
                        rng: &mut SeedRng| {
            for _ in 0..n {
                let mut d = [rng.normal(), rng.normal(), rng.normal()];
                let norm = crate::fx::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).max(1e-9);
                for v in &mut d {
                    *v /= norm;
                }
                pts.push([
                    c[0] + radii[0] * d[0],
                    c[1] + radii[1] * d[1],
                    c[2] + radii[2] * d[2],
                ]);
                labels.push(label);
            }
        };

        cylinder(n_torso, 0.0, 0.0, pelvis_z, torso_top, torso_r, 0, &mut pts, &mut labels, &mut rng);
        blob(n_head, head_c, [head_r, head_r * 1.1, head_r * 1.25], 0, &mut pts, &mut labels, &mut rng);
        blob(n_nose, nose_c, [0.022, 0.032, 0.022], 0, &mut pts, &mut labels, &mut rng);
        cylinder(n_arm, -shoulder_x, 0.0, shoulder_z - arm_len, shoulder_z, arm_r, 1, &mut pts, &mut labels, &mut rng);
        cylinder(n_arm, shoulder_x, 0.0, shoulder_z - arm_len, shoulder_z, arm_r, 2, &mut pts, &mut labels, &mut rng);
        cylinder(n_leg, -hip_x, 0.0, pelvis_z - leg_len, pelvis_z, leg_r, 3, &mut pts, &mut labels, &mut rng);
        cylinder(n_leg, hip_x, 0.0, pelvis_z - leg_len, pelvis_z, leg_r, 4, &mut pts, &mut labels, &mut rng);

        let mut centroid = [0.0f64; 3];
        for p in &pts {
            for a in 0..3 {
                centroid[a] += p[a];
            }
        }
        for a in 0..3 {
            centroid[a] /= pts.len() as f64;
        }
        for p in &mut pts {
            for a in 0..3 {
                p[a] -= centroid[a];
            }
        }
        let shift = |p: [f64; 3]| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
        Ok(ShapeTemplate {
            id,
            cloud: PointCloud::from_points(pts)?,
            labels,
            joints: [
                shift(joints[0]),
                shift(joints[1]),
                shift(joints[2]),
                shift(joints[3]),
            ],
            pelvis: shift([0.0, 0.0, pelvis_z]),
        })
    }

    /// Applies a pose point-wise: limbs rotate about their joints, then the
    /// whole figure leans about the pelvis and scales.
    pub fn deform(&self, params: &DeformParams) -> PointCloud {
        let pts = self
            .cloud
            .points()
            .iter()
            .zip(&self.labels)
            .map(|(&p, &label)| {
                let mut q = p;
                if label >= 1 {
                    let limb = (label - 1) as usize;
                    let j = self.joints[limb];
                    let rel = [q[0] - j[0], q[1] - j[1], q[2] - j[2]];
                    let rel = rot_y(params.limb_roll[limb], rel);
                    let rel = rot_x(params.limb_pitch[limb], rel);
                    q = [j[0] + rel[0], j[1] + rel[1], j[2] + rel[2]];
                }
                let rel = [q[0] - self.pelvis[0], q[1] - self.pelvis[1], q[2] - self.pelvis[2]];
                let rel = rot_x(params.torso_lean, rel);
                let q = [
                    self.pelvis[0] + rel[0],
                    self.pelvis[1] + rel[1],
                    self.pelvis[2] + rel[2],
                ];
                [q[0] * params.scale, q[1] * params.scale, q[2] * params.scale]
            })
            .collect();
        // A valid template stays valid under rigid per-segment motion.
        PointCloud::from_points(pts).expect("deformation preserves cloud validity")
    }

    pub fn n(&self) -> usize {
        self.cloud.n()
    }
}

/// Options for pair generation beyond the co-downsampling core.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOptions {
    /// Shuffle the target with a tracked inverse (ground truth stays exact).
    pub shuffle_target: bool,
    /// Rotate the source by this angle and record it as the label.
    pub rotation: Option<f64>,
}

impl Default for PairOptions {
    fn default() -> Self {
        PairOptions {
            shuffle_target: false,
            rotation: None,
        }
    }
}

/// Two deformed instances of one template, co-downsampled with identical
/// indices so the ground truth is exact.
pub fn generate_pair(
    template: &ShapeTemplate,
    deform_a: &DeformParams,
    deform_b: &DeformParams,
    n: usize,
    seed: u64,
) -> Result<ShapePair> {
    generate_pair_with(template, deform_a, deform_b, n, seed, &PairOptions::default())
}

pub fn generate_pair_with(
    template: &ShapeTemplate,
    deform_a: &DeformParams,
    deform_b: &DeformParams,
    n: usize,
    seed: u64,
    opts: &PairOptions,
) -> Result<ShapePair> {
    if n > template.n() || n == 0 {
        return Err(CoreError::arg(
            "n",
            alloc::format!("{n} out of range for template of {} points", template.n()),
        ));
    }
    let instance_a = template.deform(deform_a);
    let instance_b = template.deform(deform_b);

    // One shared subset keeps index i of the source and index i of the
    // target the same physical point.
    let mut rng = SeedRng::new(derive_seed(seed, 0xda7a, 0));
    let kept = rng.sample_indices(template.n(), n);
    let src: Vec<[f64; 3]> = kept.iter().map(|&i| instance_a.point(i)).collect();
    let tgt: Vec<[f64; 3]> = kept.iter().map(|&i| instance_b.point(i)).collect();
    let mut source = PointCloud::from_points(src)?;
    let mut target = PointCloud::from_points(tgt)?;
    let mut gt = GroundTruthMap::identity(n);

    if opts.shuffle_target {
        let perm = rng.permutation(n);
        target = target.permuted(&perm)?;
        // target position p now holds old index perm[p]; invert it.
        let mut inverse = alloc::vec![0usize; n];
        for (p, &old) in perm.iter().enumerate() {
            inverse[old] = p;
        }
        gt = GroundTruthMap::new(inverse, n)?;
    }

    let theta = match opts.rotation {
        Some(theta) => {
            source = rotate_z(&source, ZRotation::from_radians(theta));
            Some(ZRotation::from_radians(theta).radians())
        }
        None => None,
    };

    Ok(ShapePair {
        source,
        target,
        gt: Some(gt),
        theta,
    })
}

/// Dataset-level generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub pairs: usize,
    pub points: usize,
    /// Template oversampling factor: templates carry `points * oversample`
    /// candidates before co-downsampling.
    pub oversample: usize,
    /// Distinct template identities cycled across pairs.
    pub templates: usize,
    /// Same deformed instance on both sides (orientation-supervision sets).
    pub same_shape: bool,
    /// Rotate sources by bin-uniform angles and record labels.
    pub rotation_labels: bool,
    pub rotation_bins: usize,
    pub shuffle_target: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            pairs: 200,
            points: 256,
            oversample: 4,
            templates: 8,
            same_shape: false,
            rotation_labels: false,
            rotation_bins: 8,
            shuffle_target: true,
            seed: 7,
        }
    }
}

/// Generates `cfg.pairs` shape pairs. Rotation labels cycle through the bins
/// (pair `i` lands in bin `i % bins`, uniform within the bin), so requested
/// label sets cover all bins evenly.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<ShapePair>> {
    let limits = DeformLimits::default();
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let template_id = (i % cfg.templates.max(1)) as u64;
        let template =
            ShapeTemplate::generate(template_id, cfg.points * cfg.oversample.max(1), cfg.seed)?;
        let mut rng = SeedRng::new(derive_seed(cfg.seed, 0xd5, i as u64));
        let deform_a = DeformParams::sample(&mut rng, &limits);
        let deform_b = if cfg.same_shape {
            deform_a.clone()
        } else {
            DeformParams::sample(&mut rng, &limits)
        };
        let rotation = if cfg.rotation_labels {
            let bin = i % cfg.rotation_bins;
            let center = bin_to_angle(bin, cfg.rotation_bins)?;
            let half = TAU / (2.0 * cfg.rotation_bins as f64);
            Some(crate::fx::rem_euclid(
                center + rng.uniform_symmetric(half * 0.999),
                TAU,
            ))
        } else {
            None
        };
        let opts = PairOptions {
            shuffle_target: cfg.shuffle_target,
            rotation,
        };
        pairs.push(generate_pair_with(
            &template,
            &deform_a,
            &deform_b,
            cfg.points,
            derive_seed(cfg.seed, 0x9a17, i as u64),
            &opts,
        )?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist3;
    use crate::orientation::angle_to_bin;

    #[test]
    fn template_reproducible_and_labeled() {
        let a = ShapeTemplate::generate(3, 500, 11).unwrap();
        let b = ShapeTemplate::generate(3, 500, 11).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.len(), 500);
        assert!(a.labels.iter().all(|&l| (l as usize) < SEGMENTS));
        let c = ShapeTemplate::generate(4, 500, 11).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn deform_identity_is_noop_and_labels_invariant() {
        let t = ShapeTemplate::generate(0, 400, 5).unwrap();
        let d = t.deform(&DeformParams::identity());
        for i in 0..t.n() {
            assert!(dist3(d.point(i), t.cloud.point(i)) < 1e-12);
        }
        let posed = t.deform(&DeformParams {
            limb_pitch: [0.5, -0.4, 0.3, -0.2],
            limb_roll: [0.1, -0.1, 0.2, -0.2],
            torso_lean: 0.1,
            scale: 1.05,
        });
        assert_eq!(posed.n(), t.n());
    }

    #[test]
    fn limbs_stay_attached_at_joints() {
        // The body points nearest a joint must stay near the rotated limb's
        // attachment: connectivity survives deformation.
        let t = ShapeTemplate::generate(1, 2000, 9).unwrap();
        let params = DeformParams {
            limb_pitch: [1.0, -1.0, 0.8, -0.8],
            limb_roll: [0.5, -0.5, 0.4, -0.4],
            torso_lean: 0.2,
            scale: 1.0,
        };
        let posed = t.deform(&params);
        for limb in 0..4 {
            let label = (limb + 1) as u8;
            // Nearest limb point to the joint in the canonical pose.
            let mut best = (f64::INFINITY, 0usize);
            for (i, (&p, &l)) in t.cloud.points().iter().zip(&t.labels).enumerate() {
                if l == label {
                    let d = dist3(p, t.joints[limb]);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
            }
            let (canonical_gap, idx) = best;
            // After deformation the same point must sit at the same distance
            // from the (leaned) joint: rigid motion about the joint.
            let j = t.joints[limb];
            let rel = [
                j[0] - t.pelvis[0],
                j[1] - t.pelvis[1],
                j[2] - t.pelvis[2],
            ];
            let rel = rot_x(params.torso_lean, rel);
            let leaned_joint = [
                t.pelvis[0] + rel[0],
                t.pelvis[1] + rel[1],
                t.pelvis[2] + rel[2],
            ];
            let posed_gap = dist3(posed.point(idx), leaned_joint);
            assert!(
                (posed_gap - canonical_gap).abs() < 1e-9,
                "limb {limb}: {posed_gap} vs {canonical_gap}"
            );
        }
    }

    #[test]
    fn equal_deforms_no_shuffle_give_identity_pair() {
        let t = ShapeTemplate::generate(2, 600, 3).unwrap();
        let d = DeformParams::sample(&mut SeedRng::new(4), &DeformLimits::default());
        let pair = generate_pair(&t, &d, &d, 128, 77).unwrap();
        assert_eq!(pair.source, pair.target);
        let gt = pair.gt.unwrap();
        for i in 0..128 {
            assert_eq!(gt.target_of(i), i);
        }
        assert!(pair.theta.is_none());
    }

    #[test]
    fn gt_is_bijection_and_roundtrips() {
        let t = ShapeTemplate::generate(5, 800, 21).unwrap();
        let limits = DeformLimits::default();
        for i in 0..100u64 {
            let mut rng = SeedRng::new(i);
            let da = DeformParams::sample(&mut rng, &limits);
            let db = DeformParams::sample(&mut rng, &limits);
            let pair = generate_pair_with(
                &t,
                &da,
                &db,
                96,
                i,
                &PairOptions {
                    shuffle_target: true,
                    rotation: None,
                },
            )
            .unwrap();
            let gt = pair.gt.unwrap();
            assert!(gt.is_bijection(96));
            // Round trip: inverse of the inverse is the identity.
            let mut inv = alloc::vec![0usize; 96];
            for s in 0..96 {
                inv[gt.target_of(s)] = s;
            }
            for s in 0..96 {
                assert_eq!(inv[gt.target_of(s)], s);
            }
        }
    }

    #[test]
    fn shuffle_preserves_physical_correspondence() {
        let t = ShapeTemplate::generate(6, 700, 8).unwrap();
        let d = DeformParams::sample(&mut SeedRng::new(9), &DeformLimits::default());
        // Same deform on both sides: the gt target point must equal the
        // source point exactly even after shuffling.
        let pair = generate_pair_with(
            &t,
            &d,
            &d,
            64,
            123,
            &PairOptions {
                shuffle_target: true,
                rotation: None,
            },
        )
        .unwrap();
        let gt = pair.gt.unwrap();
        for i in 0..64 {
            let j = gt.target_of(i);
            assert!(dist3(pair.source.point(i), pair.target.point(j)) < 1e-12);
        }
    }

    #[test]
    fn rotation_label_matches_applied_rotation() {
        let t = ShapeTemplate::generate(7, 600, 31).unwrap();
        let d = DeformParams::sample(&mut SeedRng::new(10), &DeformLimits::default());
        let theta = 2.3;
        let pair = generate_pair_with(
            &t,
            &d,
            &d,
            80,
            5,
            &PairOptions {
                shuffle_target: false,
                rotation: Some(theta),
            },
        )
        .unwrap();
        assert!((pair.theta.unwrap() - theta).abs() < 1e-12);
        let unrotated = rotate_z(&pair.source, ZRotation::from_radians(-theta));
        for i in 0..80 {
            assert!(dist3(unrotated.point(i), pair.target.point(i)) < 1e-9);
        }
    }

    #[test]
    fn generate_pair_rejects_oversample() {
        let t = ShapeTemplate::generate(0, 100, 0).unwrap();
        let d = DeformParams::identity();
        assert!(generate_pair(&t, &d, &d, 101, 0).is_err());
        assert!(generate_pair(&t, &d, &d, 0, 0).is_err());
    }

    #[test]
    fn dataset_covers_rotation_bins_uniformly() {
        let cfg = DatasetConfig {
            pairs: 64,
            points: 64,
            rotation_labels: true,
            same_shape: true,
            ..Default::default()
        };
        let pairs = generate_dataset(&cfg).unwrap();
        assert_eq!(pairs.len(), 64);
        let mut counts = [0usize; 8];
        for p in &pairs {
            let label = angle_to_bin(p.theta.unwrap(), 8).unwrap();
            counts[label.bin] += 1;
        }
        assert_eq!(counts, [8; 8]);
    }

    #[test]
    fn dataset_deterministic_and_sized() {
        let cfg = DatasetConfig {
            pairs: 5,
            points: 48,
            ..Default::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 5);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.source, pb.source);
            assert_eq!(pa.target, pb.target);
            assert_eq!(pa.source.n(), 48);
        }
    }

    #[test]
    fn deform_params_validate_limits() {
        let limits = DeformLimits::default();
        assert!(DeformParams::identity().validate(&limits).is_ok());
        let bad = DeformParams {
            limb_pitch: [10.0, 0.0, 0.0, 0.0],
            ..DeformParams::identity()
        };
        assert!(bad.validate(&limits).is_err());
        for seed in 0..50 {
            let p = DeformParams::sample(&mut SeedRng::new(seed), &limits);
            assert!(p.validate(&limits).is_ok());
        }
    }
}
