//! Mean-Teacher machinery: stochastic transforms, paired teacher/student
//! forwards, EMA parameter updates, and the two consistency losses.
//!
//! Augmentation never permutes point indices, so teacher and student
//! similarity matrices are entrywise comparable by construction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::geometry::{add_gaussian_noise, rotate_z, PointCloud, ZRotation, TAU};
use crate::model::{build_pair_forward, Model, ModelConfig};
use crate::rng::{derive_seed, SeedRng};
use crate::tensor::Matrix;
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeConfig {
    /// Gaussian noise std (0.1 human-like preset, 0.15 animal-like preset).
    pub sigma: f64,
    /// EMA decay target for the teacher.
    pub ema_decay: f64,
    /// Ramp the decay from 0.99 over the first 10% of steps.
    pub ema_ramp: bool,
    /// Smooth-L1 transition point for the consistency losses.
    pub beta: f64,
    /// Stochastic transform toggle.
    pub tau: bool,
    /// Cross-similarity consistency toggle.
    pub ccs: bool,
    /// Self-similarity consistency toggle.
    pub css: bool,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            sigma: 0.1,
            ema_decay: 0.999,
            ema_ramp: true,
            beta: 1.0,
            tau: true,
            ccs: true,
            css: true,
        }
    }
}

/// Sigma preset for animal-like shapes.
pub const SIGMA_ANIMAL: f64 = 0.15;

/// One draw of the train-time augmentation: a shared z-rotation angle for
/// the source plus independent Gaussian noise streams for both clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticTransform {
    pub sigma: f64,
    pub theta_x: f64,
    pub noise_seed_x: u64,
    pub noise_seed_y: u64,
}

impl StochasticTransform {
    /// Samples `theta_x ~ U[0, 2pi)` and derives independent noise streams.
    pub fn sample(sigma: f64, seed: u64) -> Self {
        let mut rng = SeedRng::new(derive_seed(seed, 0x7a75, 0));
        StochasticTransform {
            sigma,
            theta_x: rng.uniform_range(0.0, TAU),
            noise_seed_x: derive_seed(seed, 0x7a75, 1),
            noise_seed_y: derive_seed(seed, 0x7a75, 2),
        }
    }

    /// No rotation, no noise.
    pub fn identity() -> Self {
        StochasticTransform {
            sigma: 0.0,
            theta_x: 0.0,
            noise_seed_x: 0,
            noise_seed_y: 0,
        }
    }

    /// `x_s = R(theta_x) x + n`, `y_s = y + n`; point order preserved.
    pub fn apply(&self, x: &PointCloud, y: &PointCloud) -> Result<(PointCloud, PointCloud)> {
        let rotated = rotate_z(x, ZRotation::from_radians(self.theta_x));
        let x_s = add_gaussian_noise(&rotated, self.sigma, self.noise_seed_x)?;
        let y_s = add_gaussian_noise(y, self.sigma, self.noise_seed_y)?;
        Ok((x_s, y_s))
    }
}

/// Samples a transform and applies it; returns `(x_s, y_s, theta_x)`.
pub fn apply_stochastic_transform(
    x: &PointCloud,
    y: &PointCloud,
    sigma: f64,
    seed: u64,
) -> Result<(PointCloud, PointCloud, f64)> {
    let t = StochasticTransform::sample(sigma, seed);
    let (x_s, y_s) = t.apply(x, y)?;
    Ok((x_s, y_s, t.theta_x))
}

/// Student and teacher parameter sets. The teacher is never touched by the
/// optimizer; it only moves through [`ema_update`].
#[derive(Clone, Debug)]
pub struct TeacherStudentState {
    pub student: Model,
    pub teacher: Model,
    /// Effective decay used by the next [`ema_update`] call.
    pub ema_decay: f64,
}

impl TeacherStudentState {
    /// Teacher starts as an exact copy of the student.
    pub fn init(cfg: &ModelConfig, seed: u64, ema_decay: f64) -> Self {
        let student = Model::init(cfg, seed);
        let teacher = student.clone();
        TeacherStudentState {
            student,
            teacher,
            ema_decay,
        }
    }
}

/// `teacher = decay * teacher + (1 - decay) * student`, every tensor.
pub fn ema_update(state: &mut TeacherStudentState) -> Result<()> {
    let decay = state.ema_decay;
    if !(0.0..=1.0).contains(&decay) {
        return Err(CoreError::arg(
            "ema_decay",
            alloc::format!("{decay} outside [0, 1]"),
        ));
    }
    if !state.teacher.store.same_layout(&state.student.store) {
        return Err(CoreError::shape(
            "teacher/student stores with identical layout",
            "mismatched parameter layouts",
        ));
    }
    for (t, s) in state
        .teacher
        .store
        .mats_mut()
        .iter_mut()
        .zip(state.student.store.mats())
    {
        for (tv, sv) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *tv = decay * *tv + (1.0 - decay) * *sv;
        }
    }
    Ok(())
}

/// Linear decay ramp from 0.99 toward the target over the first tenth of
/// training; disabled ramps return the target immediately.
pub fn effective_ema_decay(step: u64, total_steps: u64, cfg: &SeConfig) -> f64 {
    if !cfg.ema_ramp {
        return cfg.ema_decay;
    }
    let ramp_steps = (total_steps / 10).max(1);
    if step >= ramp_steps {
        return cfg.ema_decay;
    }
    let start = cfg.ema_decay.min(0.99);
    start + (cfg.ema_decay - start) * (step as f64 / ramp_steps as f64)
}

/// Mean smooth-L1 between equal-shape matrices.
pub fn smooth_l1(a: &Matrix, b: &Matrix, beta: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(CoreError::shape(
            alloc::format!("{}x{}", a.rows(), a.cols()),
            alloc::format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    if !(beta > 0.0) {
        return Err(CoreError::arg("beta", alloc::format!("{beta} must be > 0")));
    }
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let node = g.smooth_l1(an, bn, beta);
    Ok(g.value(node).item())
}

/// The four similarity matrices compared by the consistency losses.
#[derive(Clone, Debug)]
pub struct SimilarityBundle {
    /// Teacher cross-similarity on the raw pair (soft label).
    pub s_t_xy: Matrix,
    /// Teacher self-similarity of the raw source.
    pub s_t_xx: Matrix,
    /// Student cross-similarity on the augmented pair.
    pub s_s_xsys: Matrix,
    /// Student self-similarity of the augmented source.
    pub s_s_xsxs: Matrix,
}

/// `(smooth_l1(S_t_xy, S_s_xsys), smooth_l1(S_t_xx, S_s_xsxs))`. Teacher
/// matrices are plain values here, so nothing can backpropagate into them.
pub fn consistency_losses(bundle: &SimilarityBundle, beta: f64) -> Result<(f64, f64)> {
    let l_ccs = smooth_l1(&bundle.s_t_xy, &bundle.s_s_xsys, beta)?;
    let l_css = smooth_l1(&bundle.s_t_xx, &bundle.s_s_xsxs, beta)?;
    Ok((l_ccs, l_css))
}

/// Value-only teacher and student passes: the teacher aligns and embeds the
/// raw pair, the student the augmented pair.
pub fn teacher_student_forward(
    x: &PointCloud,
    y: &PointCloud,
    state: &TeacherStudentState,
    transform: &StochasticTransform,
) -> Result<SimilarityBundle> {
    let (x_s, y_s) = transform.apply(x, y)?;

    let mut tg = Graph::new();
    let tbound = state.teacher.bind_frozen(&mut tg);
    let tf = build_pair_forward(&mut tg, &tbound, &state.teacher, x, y)?;

    let mut sg = Graph::new();
    let sbound = state.student.bind_frozen(&mut sg);
    let sf = build_pair_forward(&mut sg, &sbound, &state.student, &x_s, &y_s)?;

    Ok(SimilarityBundle {
        s_t_xy: tg.value(tf.sim_xy).clone(),
        s_t_xx: tg.value(tf.sim_xx).clone(),
        s_s_xsys: sg.value(sf.sim_xy).clone(),
        s_s_xsxs: sg.value(sf.sim_xx).clone(),
    })
}
