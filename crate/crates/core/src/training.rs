//! The training loop: per-step graph assembly across all loss branches,
//! gradient-reversal bookkeeping, optimizer and EMA updates, determinism.
//!
//! Every step derives its randomness from `(seed, step, batch index)` alone,
//! so a resumed run replays exactly the draws the unbroken run would have
//! made. Teacher parameters live in a separate value-only graph; nothing can
//! backpropagate into them.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{build_cosine_similarity, build_dgcnn};
use crate::ensemble::{
    effective_ema_decay, ema_update, SeConfig, StochasticTransform, TeacherStudentState,
};
use crate::geometry::PointCloud;
use crate::model::{build_pair_forward, ModelConfig};
use crate::objectives::{build_cross_construct, build_mapping_regularizer, LossWeights};
use crate::optim::{Optimizer, OptimizerKind};
use crate::orientation::{
    angle_to_bin, build_discriminator, build_domain_loss, build_oem_forward, align_source,
    AngleDistribution, LOSS_LOG_EPS,
};
use crate::rng::derive_seed;
use crate::synth::ShapePair;
use crate::tensor::Matrix;
use crate::{CoreError, Result};

pub use crate::checkpoint::{
    decode_checkpoint, encode_checkpoint, restore_trainer, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
#[cfg(feature = "std")]
pub use crate::checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub se: SeConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 7,
            model: ModelConfig::default(),
            se: SeConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: small widths, same wiring.
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(CoreError::arg("steps", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(CoreError::arg("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::arg("learning_rate", "must be > 0"));
        }
        if !(self.se.sigma >= 0.0) {
            return Err(CoreError::arg("se.sigma", "must be >= 0"));
        }
        if self.model.oem.enabled && self.model.oem.dam && !(self.model.oem.gamma > 1.0) {
            return Err(CoreError::arg("oem.gamma", "must be > 1"));
        }
        self.loss.validate()
    }
}

/// Per-step loss components (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_ccs: f64,
    pub l_css: f64,
    pub l_angle: f64,
    pub l_domain: f64,
    pub l_cons: f64,
    pub l_norm: f64,
    pub total: f64,
}

/// Mutable training state: models, optimizer, step counter.
pub struct TrainerState {
    pub ts: TeacherStudentState,
    pub opt: Optimizer,
    pub step: u64,
}

/// Fresh state from a config: student initialized from the seed, teacher an
/// exact copy, optimizer zeroed.
pub fn init_trainer(cfg: &TrainConfig) -> Result<TrainerState> {
    cfg.validate()?;
    let ts = TeacherStudentState::init(&cfg.model, cfg.seed, cfg.se.ema_decay);
    let opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &ts.student.store);
    Ok(TrainerState { ts, opt, step: 0 })
}

struct PairOutcome {
    metrics: StepMetrics,
    grads: Vec<Matrix>,
}

fn component_value(g: &Graph, node: Option<NodeId>) -> f64 {
    node.map(|n| g.value(n).item()).unwrap_or(0.0)
}

/// Builds the full per-pair loss graph and runs backward.
fn pair_forward_backward(
    pair: &ShapePair,
    state: &TrainerState,
    cfg: &TrainConfig,
    batch_index: usize,
) -> Result<PairOutcome> {
    let student = &state.ts.student;
    let mcfg = &student.cfg;
    let seed = derive_seed(cfg.seed, state.step, batch_index as u64);
    let transform = if cfg.se.tau {
        StochasticTransform::sample(cfg.se.sigma, seed)
    } else {
        StochasticTransform::identity()
    };
    // The student path works on centered clouds directly so the transform's
    // z-rotation acts about the shape; the teacher centers internally.
    let (x, y) = if mcfg.center_inputs {
        (pair.source.centered(), pair.target.centered())
    } else {
        (pair.source.clone(), pair.target.clone())
    };
    let (x_s, y_s) = transform.apply(&x, &y)?;

    // Teacher pass on the raw pair, value-only.
    let (s_t_xy, s_t_xx) = {
        let mut tg = Graph::new();
        let tb = state.ts.teacher.bind_frozen(&mut tg);
        let tf = build_pair_forward(&mut tg, &tb, &state.ts.teacher, &pair.source, &pair.target)?;
        (tg.value(tf.sim_xy).clone(), tg.value(tf.sim_xx).clone())
    };

    let mut g = Graph::new();
    let sb = state.ts.student.bind(&mut g);

    // Orientation branches: angle supervision on the same-shape rotated pair
    // (x_s, x), adversarial domain loss on both that pair (augmented class)
    // and the cross-shape pair (real class).
    let mut l_angle_node: Option<NodeId> = None;
    let mut l_domain_node: Option<NodeId> = None;
    let aligned_xs: PointCloud;
    if mcfg.oem.enabled {
        let label = angle_to_bin(transform.theta_x, mcfg.oem.bins)?;
        let sup = build_oem_forward(&mut g, &sb, &student.oem, &x_s, &x)?;
        l_angle_node = Some(g.cross_entropy_index(sup.angle_probs, label.bin, LOSS_LOG_EPS));

        let real = build_oem_forward(&mut g, &sb, &student.oem, &x_s, &y_s)?;
        if !g.value(sup.angle_probs).is_finite() || !g.value(real.angle_probs).is_finite() {
            return Err(CoreError::NonFinite("l_angle"));
        }
        let dist = AngleDistribution::new(g.value(real.angle_probs).row(0).to_vec())?;
        aligned_xs = align_source(&x_s, &dist);

        if mcfg.oem.dam {
            let grl = Some(mcfg.oem.grl_weight);
            let d_fake = build_discriminator(&mut g, &sb, &student.oem, sup.p_hat, grl);
            let d_real = build_discriminator(&mut g, &sb, &student.oem, real.p_hat, grl);
            let lf = build_domain_loss(&mut g, d_fake, false, mcfg.oem.gamma);
            let lr = build_domain_loss(&mut g, d_real, true, mcfg.oem.gamma);
            let sum = g.add(lf, lr);
            l_domain_node = Some(g.scale(sum, 0.5));
        }
    } else {
        aligned_xs = x_s.clone();
    }

    // Student backbone on the aligned augmented pair.
    let (f_xs, _) = build_dgcnn(&mut g, &sb, &student.backbone, &aligned_xs)?;
    let (f_ys, _) = build_dgcnn(&mut g, &sb, &student.backbone, &y_s)?;
    if !g.value(f_xs).is_finite() || !g.value(f_ys).is_finite() {
        return Err(CoreError::NonFinite("features"));
    }
    let s_xy = build_cosine_similarity(&mut g, f_xs, f_ys);
    let s_xx = build_cosine_similarity(&mut g, f_xs, f_xs);
    let s_yy = build_cosine_similarity(&mut g, f_ys, f_ys);

    // Consistency against the detached teacher similarities.
    let mut l_ccs_node: Option<NodeId> = None;
    let mut l_css_node: Option<NodeId> = None;
    if cfg.se.ccs {
        let t = g.constant(s_t_xy);
        l_ccs_node = Some(g.smooth_l1(t, s_xy, cfg.se.beta));
    }
    if cfg.se.css {
        let t = g.constant(s_t_xx);
        l_css_node = Some(g.smooth_l1(t, s_xx, cfg.se.beta));
    }

    // Construction losses over latent-neighbor reconstructions.
    let k = cfg.loss.k;
    let xs_coords = g.constant(aligned_xs.to_matrix());
    let ys_coords = g.constant(y_s.to_matrix());
    let y_cross = build_cross_construct(&mut g, s_xy, ys_coords, k)?;
    let s_yx = g.transpose(s_xy);
    let x_cross = build_cross_construct(&mut g, s_yx, xs_coords, k)?;
    let y_self = build_cross_construct(&mut g, s_yy, ys_coords, k)?;
    let x_self = build_cross_construct(&mut g, s_xx, xs_coords, k)?;
    let cd_y_cross = g.chamfer(ys_coords, y_cross);
    let cd_x_cross = g.chamfer(xs_coords, x_cross);
    let cd_y_self = g.chamfer(ys_coords, y_self);
    let cd_x_self = g.chamfer(xs_coords, x_self);
    let cross_sum = g.add(cd_y_cross, cd_x_cross);
    let self_sum = g.add(cd_y_self, cd_x_self);
    let cross_w = g.scale(cross_sum, cfg.loss.lambda_cc);
    let self_w = g.scale(self_sum, cfg.loss.lambda_sc);
    let l_cons_node = g.add(cross_w, self_w);

    // Neighborhood regularizer on the source-to-target construction.
    let l_norm_node = build_mapping_regularizer(
        &mut g,
        y_cross,
        &aligned_xs,
        k,
        cfg.loss.alpha,
        cfg.loss.reg_sign,
    )?;

    // Weighted total.
    let mut total = l_cons_node;
    for (node, weight) in [
        (l_ccs_node, cfg.loss.l1),
        (l_css_node, cfg.loss.l2),
        (l_angle_node, cfg.loss.l3),
        (l_domain_node, cfg.loss.l4),
        (Some(l_norm_node), cfg.loss.l5),
    ] {
        if let Some(n) = node {
            let s = g.scale(n, weight);
            total = g.add(total, s);
        }
    }

    let metrics = StepMetrics {
        step: state.step,
        l_ccs: component_value(&g, l_ccs_node),
        l_css: component_value(&g, l_css_node),
        l_angle: component_value(&g, l_angle_node),
        l_domain: component_value(&g, l_domain_node),
        l_cons: g.value(l_cons_node).item(),
        l_norm: g.value(l_norm_node).item(),
        total: g.value(total).item(),
    };
    for (name, v) in [
        ("l_ccs", metrics.l_ccs),
        ("l_css", metrics.l_css),
        ("l_angle", metrics.l_angle),
        ("l_domain", metrics.l_domain),
        ("l_cons", metrics.l_cons),
        ("l_norm", metrics.l_norm),
        ("total", metrics.total),
    ] {
        if !v.is_finite() {
            return Err(CoreError::NonFinite(name));
        }
    }

    let mut grads_out = g.backward(total);
    let grads = sb
        .leaves()
        .iter()
        .zip(student.store.mats())
        .map(|(&leaf, m)| {
            grads_out
                .take(leaf)
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();
    Ok(PairOutcome { metrics, grads })
}

/// Loss components plus per-parameter gradients for one pair, without
/// touching the optimizer or the teacher. The gradient vector aligns with
/// the student parameter store.
pub fn pair_gradients(
    pair: &ShapePair,
    state: &TrainerState,
    cfg: &TrainConfig,
    batch_index: usize,
) -> Result<(StepMetrics, Vec<Matrix>)> {
    let outcome = pair_forward_backward(pair, state, cfg, batch_index)?;
    Ok((outcome.metrics, outcome.grads))
}

/// One optimization step over a batch of pairs: forward/backward per pair,
/// gradient averaging, optimizer update on the student, then the EMA update
/// of the teacher.
pub fn train_step(
    batch: &[&ShapePair],
    state: &mut TrainerState,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(CoreError::arg("batch", "empty batch"));
    }
    let mut grads: Option<Vec<Matrix>> = None;
    let mut metrics = StepMetrics {
        step: state.step,
        ..Default::default()
    };
    for (bi, pair) in batch.iter().enumerate() {
        let outcome = pair_forward_backward(pair, state, cfg, bi)?;
        metrics.l_ccs += outcome.metrics.l_ccs;
        metrics.l_css += outcome.metrics.l_css;
        metrics.l_angle += outcome.metrics.l_angle;
        metrics.l_domain += outcome.metrics.l_domain;
        metrics.l_cons += outcome.metrics.l_cons;
        metrics.l_norm += outcome.metrics.l_norm;
        metrics.total += outcome.metrics.total;
        match &mut grads {
            None => grads = Some(outcome.grads),
            Some(acc) => {
                for (a, gnew) in acc.iter_mut().zip(&outcome.grads) {
                    a.axpy(1.0, gnew);
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = grads.expect("nonempty batch");
    for gm in &mut grads {
        gm.scale_in_place(scale);
    }
    metrics.l_ccs *= scale;
    metrics.l_css *= scale;
    metrics.l_angle *= scale;
    metrics.l_domain *= scale;
    metrics.l_cons *= scale;
    metrics.l_norm *= scale;
    metrics.total *= scale;

    state.opt.apply(&mut state.ts.student.store, &grads)?;
    state.ts.ema_decay = effective_ema_decay(state.step, cfg.steps, &cfg.se);
    ema_update(&mut state.ts)?;
    state.step += 1;
    Ok(metrics)
}

/// Deterministic cyclic batch assembly for step `step`.
pub fn batch_for_step<'p>(pairs: &'p [ShapePair], step: u64, batch_size: usize) -> Vec<&'p ShapePair> {
    let n = pairs.len() as u64;
    (0..batch_size as u64)
        .map(|i| &pairs[((step * batch_size as u64 + i) % n) as usize])
        .collect()
}

/// Runs training from the state's current step up to `cfg.steps`, invoking
/// `on_step` after every step.
pub fn run_training(
    state: &mut TrainerState,
    pairs: &[ShapePair],
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<()> {
    run_training_until(state, pairs, cfg, cfg.steps, on_step)
}

/// Runs training up to `until_step` (at most `cfg.steps`). Stopping early
/// never alters schedules that depend on the configured total, so chunked
/// runs and checkpoint-resumed runs replay the unbroken trajectory exactly.
pub fn run_training_until(
    state: &mut TrainerState,
    pairs: &[ShapePair],
    cfg: &TrainConfig,
    until_step: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<()> {
    if pairs.is_empty() {
        return Err(CoreError::arg("pairs", "no training pairs"));
    }
    while state.step < until_step.min(cfg.steps) {
        let batch = batch_for_step(pairs, state.step, cfg.batch_size);
        let metrics = train_step(&batch, state, cfg)?;
        on_step(&metrics);
    }
    Ok(())
}
