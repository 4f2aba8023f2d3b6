// A4-shaped probe: supervised rotation-bin training on labeled same-shape pairs.
use shapecorr_core::autodiff::Graph;
use shapecorr_core::geometry::add_gaussian_noise;
use shapecorr_core::model::{Model, ModelConfig};
use shapecorr_core::optim::{Optimizer, OptimizerKind};
use shapecorr_core::orientation::{angle_to_bin, build_oem_forward, LOSS_LOG_EPS};
use shapecorr_core::rng::derive_seed;
use shapecorr_core::synth::{generate_dataset, DatasetConfig};
use shapecorr_core::tensor::Matrix;
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let noise: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.02);

    let cfg = ModelConfig::desk();
    let data_cfg = DatasetConfig {
        pairs: 500, points: 64, same_shape: true, rotation_labels: true,
        shuffle_target: false, seed: 100, ..Default::default()
    };
    let all = generate_dataset(&DatasetConfig { pairs: 600, ..data_cfg.clone() }).unwrap();
    let (train, held) = all.split_at(500);

    let mut model = Model::init(&cfg, 42);
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, &model.store);
    let t0 = Instant::now();
    for step in 0..steps {
        let mut acc: Option<Vec<Matrix>> = None;
        let mut lsum = 0.0;
        for b in 0..batch {
            let pair = &train[(step * batch + b) % train.len()];
            // Rotation re-augmentation within the stored bin: fresh angle
            // each visit, same label coverage.
            let mut rng = shapecorr_core::rng::SeedRng::new(derive_seed(3, step as u64, b as u64));
            let stored_bin = angle_to_bin(pair.theta.unwrap(), 8).unwrap().bin;
            let half = std::f64::consts::TAU / 16.0;
            let center = (stored_bin as f64 + 0.5) * std::f64::consts::TAU / 8.0;
            let fresh = center + rng.uniform_range(-half * 0.999, half * 0.999);
            let phi = fresh - pair.theta.unwrap();
            let rotated = shapecorr_core::geometry::rotate_z(&pair.source, shapecorr_core::geometry::ZRotation::from_radians(phi));
            let theta_total = shapecorr_core::geometry::ZRotation::from_radians(pair.theta.unwrap() + phi).radians();
            let label = angle_to_bin(theta_total, 8).unwrap();
            let src = add_gaussian_noise(&rotated.centered(), noise, derive_seed(1, step as u64, b as u64)).unwrap();
            let tgt = add_gaussian_noise(&pair.target.centered(), noise, derive_seed(2, step as u64, b as u64)).unwrap();
            let mut g = Graph::new();
            let sb = model.bind(&mut g);
            let fwd = build_oem_forward(&mut g, &sb, &model.oem, &src, &tgt).unwrap();
            let loss = g.cross_entropy_index(fwd.angle_probs, label.bin, LOSS_LOG_EPS);
            lsum += g.value(loss).item();
            let grads = g.backward(loss);
            let gv: Vec<Matrix> = sb.leaves().iter().zip(model.store.mats()).map(|(&l, m)| grads.get(l).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))).collect();
            match &mut acc {
                None => acc = Some(gv),
                Some(a) => for (x, y) in a.iter_mut().zip(&gv) { x.axpy(1.0, y); },
            }
        }
        let mut gv = acc.unwrap();
        for m in &mut gv { m.scale_in_place(1.0 / batch as f64); }
        opt.apply(&mut model.store, &gv).unwrap();
        if step % 100 == 0 {
            println!("step {step}: loss {:.4} ({:.0} ms/step)", lsum / batch as f64, t0.elapsed().as_millis() as f64 / (step + 1) as f64);
        }
    }
    println!("train {:.0}s", t0.elapsed().as_secs_f64());
    let mut correct = 0;
    for pair in held {
        let out = model.infer_pair(&pair.source, &pair.target).unwrap();
        if out.angle.unwrap().argmax_bin() == angle_to_bin(pair.theta.unwrap(), 8).unwrap().bin { correct += 1; }
    }
    println!("held-out bin accuracy: {}/{}", correct, held.len());
}
