use shapecorr_core::autodiff::Graph;
use shapecorr_core::ensemble::StochasticTransform;
use shapecorr_core::model::{Model, ModelConfig};
use shapecorr_core::optim::{Optimizer, OptimizerKind};
use shapecorr_core::orientation::{angle_to_bin, build_oem_forward, LOSS_LOG_EPS};
use shapecorr_core::synth::{generate_dataset, DatasetConfig};
use shapecorr_core::tensor::Matrix;

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1e-3);
    let n_fixed: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(8);
    let cfg = ModelConfig::desk();
    let mut model = Model::init(&cfg, 42);
    let data = generate_dataset(&DatasetConfig { pairs: 1, points: 64, same_shape: true, seed: 100, ..Default::default() }).unwrap();
    let x = data[0].source.centered();

    // Fixed supervised samples: one per bin.
    let samples: Vec<_> = (0..n_fixed).map(|b| {
        let theta = (b as f64 + 0.5) * std::f64::consts::TAU / 8.0;
        let t = StochasticTransform { sigma: 0.05, theta_x: theta, noise_seed_x: b as u64, noise_seed_y: 0 };
        let (x_s, _) = t.apply(&x, &x).unwrap();
        (x_s, angle_to_bin(theta, 8).unwrap())
    }).collect();

    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, &model.store);
    for step in 0..400 {
        let (x_s, label) = &samples[step % samples.len()];
        let mut g = Graph::new();
        let sb = model.bind(&mut g);
        let fwd = build_oem_forward(&mut g, &sb, &model.oem, x_s, &x).unwrap();
        let loss = g.cross_entropy_index(fwd.angle_probs, label.bin, LOSS_LOG_EPS);
        if step % 50 == 0 {
            // average loss over all fixed samples
            let mut tot = 0.0; let mut correct = 0;
            for (xs2, lb2) in &samples {
                let mut g2 = Graph::new();
                let sb2 = model.bind(&mut g2);
                let f2 = build_oem_forward(&mut g2, &sb2, &model.oem, xs2, &x).unwrap();
                let l2 = g2.cross_entropy_index(f2.angle_probs, lb2.bin, LOSS_LOG_EPS);
                tot += g2.value(l2).item();
                let probs = g2.value(f2.angle_probs);
                let am = (0..8).max_by(|&a,&b| probs.at(0,a).partial_cmp(&probs.at(0,b)).unwrap()).unwrap();
                if am == lb2.bin { correct += 1; }
            }
            println!("step {step}: mean loss {:.4}, correct {}/{}", tot / samples.len() as f64, correct, samples.len());
        }
        let grads = g.backward(loss);
        let gv: Vec<Matrix> = sb.leaves().iter().zip(model.store.mats()).map(|(&l, m)| grads.get(l).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))).collect();
        opt.apply(&mut model.store, &gv).unwrap();
    }
}
