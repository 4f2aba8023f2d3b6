use shapecorr_core::autodiff::Graph;
use shapecorr_core::model::ModelConfig;
use shapecorr_core::orientation::{angle_to_bin, build_discriminator, build_domain_loss, build_oem_forward, LOSS_LOG_EPS};
use shapecorr_core::synth::{generate_dataset, DatasetConfig};
use shapecorr_core::ensemble::{StochasticTransform, TeacherStudentState};

fn main() {
    let cfg = ModelConfig::desk();
    let ts = TeacherStudentState::init(&cfg, 42, 0.999);
    let student = &ts.student;
    let data = generate_dataset(&DatasetConfig { pairs: 1, points: 64, same_shape: true, seed: 100, ..Default::default() }).unwrap();
    let pair = &data[0];
    let x = pair.source.centered();
    let t = StochasticTransform::sample(0.1, 7);
    let (x_s, _) = t.apply(&x, &x).unwrap();
    let label = angle_to_bin(t.theta_x, cfg.oem.bins).unwrap();

    let mut g = Graph::new();
    let sb = student.bind(&mut g);
    let sup = build_oem_forward(&mut g, &sb, &student.oem, &x_s, &x).unwrap();
    let l_angle = g.cross_entropy_index(sup.angle_probs, label.bin, LOSS_LOG_EPS);
    let d = build_discriminator(&mut g, &sb, &student.oem, sup.p_hat, Some(1.0));
    let l_dom = build_domain_loss(&mut g, d, false, 2.0);
    let wdom = g.scale(l_dom, 0.8);
    let total = g.add(l_angle, wdom);
    println!("angle loss {:.4}, probs {:?}", g.value(l_angle).item(), g.value(sup.angle_probs).as_slice());
    println!("d = {:.4}", g.value(d).item());
    let grads = g.backward(total);
    for (i, (name, leaf)) in student.store.names().iter().zip(sb.leaves()).enumerate() {
        let norm = grads.get(*leaf).map(|m| m.frob_norm()).unwrap_or(0.0);
        if name.starts_with("oem") {
            println!("{i:3} {name:24} grad norm {norm:.6e}");
        }
    }
}
