//! End-to-end training behavior: loss decreases on a frozen tiny batch,
//! resume is exact, and gradient reversal shows up with the right sign at
//! the discriminator boundary.

use shapecorr_core::autodiff::Graph;
use shapecorr_core::model::{Model, ModelConfig};
use shapecorr_core::nn::BoundParams;
use shapecorr_core::orientation::{build_discriminator, build_oem_forward, build_domain_loss};
use shapecorr_core::synth::{generate_dataset, DatasetConfig, ShapePair};
use shapecorr_core::training::{
    batch_for_step, decode_checkpoint, encode_checkpoint, init_trainer, restore_trainer,
    run_training, train_step, TrainConfig,
};

fn micro_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        model: ModelConfig::micro(),
        seed: 11,
        ..Default::default()
    }
}

fn pairs(count: usize, points: usize, seed: u64) -> Vec<ShapePair> {
    generate_dataset(&DatasetConfig {
        pairs: count,
        points,
        seed,
        templates: 2,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn smoke_training_reduces_loss_on_frozen_batch() {
    // Four pairs at N=64 with the stochastic transform frozen to identity,
    // so step losses are directly comparable; after 50 steps the total loss
    // must sit strictly below the step-0 value.
    let mut cfg = micro_cfg(50);
    cfg.se.tau = false;
    let data = pairs(4, 64, 21);
    let mut state = init_trainer(&cfg).unwrap();
    let mut first = None;
    let mut last = None;
    run_training(&mut state, &data, &cfg, |m| {
        if m.step == 0 {
            first = Some(m.total);
        }
        last = Some(m.total);
    })
    .unwrap();
    let (first, last) = (first.unwrap(), last.unwrap());
    assert!(
        last < first,
        "loss failed to decrease: step0 {first}, step49 {last}"
    );
}

#[test]
fn resume_matches_unbroken_run_exactly() {
    let data = pairs(3, 24, 33);

    // Unbroken 6-step run.
    let cfg6 = micro_cfg(6);
    let mut full = init_trainer(&cfg6).unwrap();
    let mut full_trace = Vec::new();
    run_training(&mut full, &data, &cfg6, |m| full_trace.push(m.total)).unwrap();

    // 3 steps, checkpoint bytes, restore, 3 more.
    let mut half = init_trainer(&cfg6).unwrap();
    shapecorr_core::training::run_training_until(&mut half, &data, &cfg6, 3, |_| {}).unwrap();
    let bytes = encode_checkpoint(&half, &cfg6).unwrap();
    let ckpt = decode_checkpoint(&bytes).unwrap();
    let (mut resumed, rcfg) = restore_trainer(&ckpt).unwrap();
    assert_eq!(rcfg, cfg6);
    assert_eq!(resumed.step, 3);
    let mut tail = Vec::new();
    run_training(&mut resumed, &data, &cfg6, |m| tail.push(m.total)).unwrap();

    assert_eq!(tail.len(), 3);
    for (i, t) in tail.iter().enumerate() {
        let diff = (t - full_trace[3 + i]).abs();
        assert!(diff <= 1e-10, "step {} loss diverged by {diff}", 3 + i);
    }
    for (a, b) in full
        .ts
        .student
        .store
        .mats()
        .iter()
        .zip(resumed.ts.student.store.mats())
    {
        assert_eq!(a, b, "student parameters diverged after resume");
    }
}

#[test]
fn gradient_reversal_sign_at_discriminator_boundary() {
    // The gradient flowing into p_hat from the domain loss must be the exact
    // negation of the gradient at the discriminator's input.
    let model = Model::init(&ModelConfig::micro(), 5);
    let data = pairs(1, 24, 44);
    let x = data[0].source.centered();
    let y = data[0].target.centered();

    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.store);
    let fwd = build_oem_forward(&mut g, &bound, &model.oem, &x, &y).unwrap();
    // Insert the reversal explicitly so both sides of the boundary are
    // observable: probe = grl(p_hat), discriminator consumes the probe.
    let probe = g.grl(fwd.p_hat, 1.0);
    let d = build_discriminator(&mut g, &bound, &model.oem, probe, None);
    let loss = build_domain_loss(&mut g, d, true, 2.0);
    let grads = g.backward(loss);
    let up = grads.get(fwd.p_hat).expect("gradient reaches p_hat");
    let down = grads.get(probe).expect("gradient at discriminator input");
    let mut sum = up.clone();
    sum.axpy(1.0, down);
    assert!(down.frob_norm() > 0.0, "probe gradient must be nonzero");
    assert!(
        sum.frob_norm() <= 1e-15 * down.frob_norm().max(1.0),
        "reversed gradient is not the exact negation"
    );
}

#[test]
fn batch_of_two_averages_gradients() {
    let cfg = TrainConfig {
        batch_size: 2,
        ..micro_cfg(2)
    };
    let data = pairs(4, 24, 55);
    let mut state = init_trainer(&cfg).unwrap();
    let batch = batch_for_step(&data, 0, 2);
    let m = train_step(&batch, &mut state, &cfg).unwrap();
    assert!(m.total.is_finite());
    assert_eq!(state.step, 1);
}

#[test]
fn trained_model_beats_untrained_on_training_shapes() {
    // Not an accuracy bar, just the direction: a short run on a handful of
    // pairs should improve correspondence over the random-init model on
    // those same pairs.
    use shapecorr_core::metrics::evaluate_model;
    let cfg = micro_cfg(120);
    let data = pairs(6, 48, 66);
    let mut state = init_trainer(&cfg).unwrap();
    let untrained = state.ts.teacher.clone();
    run_training(&mut state, &data, &cfg, |_| {}).unwrap();

    let tols = [0.2];
    let (_, before) = evaluate_model(&untrained, &data, &tols).unwrap();
    let (_, after) = evaluate_model(&state.ts.teacher, &data, &tols).unwrap();
    assert!(
        after.acc[0].1 >= before.acc[0].1,
        "teacher did not improve: {} -> {}",
        before.acc[0].1,
        after.acc[0].1
    );
}
