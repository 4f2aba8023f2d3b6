//! Correspondence inference and evaluation metrics.
//!
//! `err` is the mean Euclidean distance (cm) between the predicted target
//! point and the true one; `acc(eps)` is the fraction of predictions within
//! `eps` times the target diameter. Both follow the strict-inequality
//! indicator convention.

use alloc::vec::Vec;

use crate::geometry::{dist3, max_diameter, rotate_z, GroundTruthMap, PointCloud, ZRotation, TAU};
use crate::model::Model;
use crate::rng::{derive_seed, SeedRng};
use crate::synth::ShapePair;
use crate::tensor::Matrix;
use crate::{CoreError, Result};

/// Predicted target index per source point, with measured distances to the
/// ground-truth targets once a ground truth is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceResult {
    pub mapping: Vec<usize>,
    /// `|y[f(x_i)] - y[gt_i]|` per source point (cm); filled by
    /// [`measure_distances`], empty straight out of inference.
    pub distances_cm: Vec<f64>,
}

/// Row-wise argmax of the similarity matrix; ties break to the lowest index.
pub fn infer_correspondence(s: &Matrix) -> CorrespondenceResult {
    let mut mapping = Vec::with_capacity(s.rows());
    for r in 0..s.rows() {
        let row = s.row(r);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, j);
            }
        }
        mapping.push(best.1);
    }
    CorrespondenceResult {
        mapping,
        distances_cm: Vec::new(),
    }
}

/// Fills per-point distances between mapped and ground-truth target points.
pub fn measure_distances(
    result: &mut CorrespondenceResult,
    y: &PointCloud,
    gt: &GroundTruthMap,
) -> Result<()> {
    if result.mapping.len() != gt.len() {
        return Err(CoreError::shape(
            alloc::format!("{} gt rows", result.mapping.len()),
            alloc::format!("{}", gt.len()),
        ));
    }
    result.distances_cm = result
        .mapping
        .iter()
        .zip(gt.as_slice())
        .map(|(&pred, &truth)| dist3(y.point(pred), y.point(truth)))
        .collect();
    Ok(())
}

/// Average correspondence error: `(1/n) sum_i |y[f(x_i)] - y[gt_i]|` in cm.
pub fn correspondence_error(
    result: &CorrespondenceResult,
    y: &PointCloud,
    gt: &GroundTruthMap,
) -> f64 {
    let n = result.mapping.len();
    let sum: f64 = result
        .mapping
        .iter()
        .zip(gt.as_slice())
        .map(|(&pred, &truth)| dist3(y.point(pred), y.point(truth)))
        .sum();
    sum / n as f64
}

/// Fraction of points with `|y[f(x_i)] - y[gt_i]| < eps * d`, where `d` is
/// the maximal pairwise distance of the target cloud.
pub fn correspondence_accuracy(
    result: &CorrespondenceResult,
    y: &PointCloud,
    gt: &GroundTruthMap,
    eps: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(CoreError::arg("eps", alloc::format!("{eps} outside [0, 1]")));
    }
    let d = max_diameter(y);
    let n = result.mapping.len();
    let hits = result
        .mapping
        .iter()
        .zip(gt.as_slice())
        .filter(|&(&pred, &truth)| dist3(y.point(pred), y.point(truth)) < eps * d)
        .count();
    Ok(hits as f64 / n as f64)
}

/// One evaluated pair: prediction plus what is needed to score it.
#[derive(Clone, Debug)]
pub struct PairEval {
    pub result: CorrespondenceResult,
    pub target: PointCloud,
    pub gt: GroundTruthMap,
}

/// Aggregate metrics over a set of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub err_cm: f64,
    /// `(tolerance, mean accuracy)` rows, ascending in tolerance.
    pub acc: Vec<(f64, f64)>,
    pub n_pairs: usize,
}

/// Default tolerance grid; 0.01 is the headline operating point.
pub const DEFAULT_TOLERANCES: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.10, 0.20];

/// Mean `err` and mean `acc` at each tolerance, averaged over pairs.
pub fn accuracy_curve(evals: &[PairEval], tolerances: &[f64]) -> Result<MetricsReport> {
    if evals.is_empty() {
        return Err(CoreError::arg("evals", "no pairs to aggregate"));
    }
    if tolerances.windows(2).any(|w| w[0] > w[1]) {
        return Err(CoreError::arg("tolerances", "must be sorted ascending"));
    }
    let mut err_sum = 0.0;
    let mut acc_sums = alloc::vec![0.0f64; tolerances.len()];
    for e in evals {
        err_sum += correspondence_error(&e.result, &e.target, &e.gt);
        for (slot, &tol) in acc_sums.iter_mut().zip(tolerances) {
            *slot += correspondence_accuracy(&e.result, &e.target, &e.gt, tol)?;
        }
    }
    let n = evals.len() as f64;
    Ok(MetricsReport {
        err_cm: err_sum / n,
        acc: tolerances
            .iter()
            .zip(acc_sums)
            .map(|(&t, s)| (t, s / n))
            .collect(),
        n_pairs: evals.len(),
    })
}

/// Test-set augmentation: optional Gaussian noise on both clouds and an
/// optional uniform random z-rotation of the source. Ground-truth index maps
/// are untouched.
pub fn augment_test_set(
    pairs: &[ShapePair],
    use_noise: bool,
    use_rotation: bool,
    sigma: f64,
    seed: u64,
) -> Result<Vec<ShapePair>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut source = pair.source.clone();
        let mut target = pair.target.clone();
        if use_rotation {
            let mut rng = SeedRng::new(derive_seed(seed, 0x07, i as u64));
            let theta = rng.uniform_range(0.0, TAU);
            source = rotate_z(&source, ZRotation::from_radians(theta));
        }
        if use_noise {
            source = crate::geometry::add_gaussian_noise(
                &source,
                sigma,
                derive_seed(seed, 0x0a, i as u64),
            )?;
            target = crate::geometry::add_gaussian_noise(
                &target,
                sigma,
                derive_seed(seed, 0x0b, i as u64),
            )?;
        }
        out.push(ShapePair {
            source,
            target,
            gt: pair.gt.clone(),
            theta: pair.theta,
        });
    }
    Ok(out)
}

/// Runs the frozen model over every pair and scores it.
pub fn evaluate_model(
    model: &Model,
    pairs: &[ShapePair],
    tolerances: &[f64],
) -> Result<(Vec<PairEval>, MetricsReport)> {
    let mut evals = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let gt = pair
            .gt
            .clone()
            .ok_or_else(|| CoreError::arg("pairs", "evaluation requires ground truth"))?;
        let out = model.infer_pair(&pair.source, &pair.target)?;
        let mut result = infer_correspondence(&out.similarity);
        measure_distances(&mut result, &pair.target, &gt)?;
        evals.push(PairEval {
            result,
            target: pair.target.clone(),
            gt,
        });
    }
    let report = accuracy_curve(&evals, tolerances)?;
    Ok((evals, report))
}
