// Feasibility probe: OEM-only rotation-bin training (A4 shape).
use shapecorr_core::orientation::angle_to_bin;
use shapecorr_core::synth::{generate_dataset, DatasetConfig};
use shapecorr_core::training::{batch_for_step, init_trainer, train_step, TrainConfig};
use std::time::Instant;

fn main() {
    let n_points = 64;
    let train_pairs = 500;
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let dam: bool = std::env::args().nth(2).map(|s| s == "1").unwrap_or(true);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1);

    let mut cfg = TrainConfig::desk();
    cfg.steps = steps;
    cfg.seed = 42;
    // OEM-only: zero out backbone-side losses.
    cfg.loss.lambda_cc = 0.0;
    cfg.loss.lambda_sc = 0.0;
    cfg.loss.l1 = 0.0;
    cfg.loss.l2 = 0.0;
    cfg.loss.l5 = 0.0;
    cfg.se.ccs = false;
    cfg.se.css = false;
    cfg.model.oem.dam = dam;
    cfg.learning_rate = lr;
    cfg.batch_size = batch;

    let data_cfg = DatasetConfig {
        pairs: train_pairs,
        points: n_points,
        same_shape: true,
        rotation_labels: true,
        shuffle_target: false,
        seed: 100,
        ..Default::default()
    };
    let train = generate_dataset(&data_cfg).unwrap();
    let held = generate_dataset(&DatasetConfig { pairs: 100, seed: 999, ..data_cfg.clone() }).unwrap();

    let mut state = init_trainer(&cfg).unwrap();
    let t0 = Instant::now();
    for step in 0..cfg.steps {
        let batch = batch_for_step(&train, step, cfg.batch_size);
        let m = train_step(&batch, &mut state, &cfg).unwrap();
        if step % 250 == 0 {
            println!("step {step}: angle {:.4} domain {:.4} total {:.4} ({:.0} ms/step)",
                m.l_angle, m.l_domain, m.total, t0.elapsed().as_millis() as f64 / (step + 1) as f64);
        }
    }
    println!("train time: {:.1}s", t0.elapsed().as_secs_f64());

    // Held-out bin accuracy via the student OEM.
    let mut correct = 0;
    for pair in &held {
        let out = state.ts.student.infer_pair(&pair.source, &pair.target).unwrap();
        let pred = out.angle.unwrap().argmax_bin();
        let label = angle_to_bin(pair.theta.unwrap(), 8).unwrap().bin;
        if pred == label { correct += 1; }
    }
    println!("held-out bin accuracy: {}/{}", correct, held.len());

}
