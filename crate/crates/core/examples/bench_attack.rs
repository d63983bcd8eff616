//! Rough timing of attack iterations on both model families.

use freqlab_core::attacks::{optimize_attack, AttackConfig, Components};
use freqlab_core::models::{Cnn, CnnConfig, Model, Vit, VitConfig};
use freqlab_core::rng::Rng;
use freqlab_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let mut rng = Rng::new(1);
    let x = Tensor::rand_uniform(&[3, 32, 32], 0.05, 0.95, &mut rng);
    for (name, model) in [
        ("cnn16", Model::Cnn(Cnn::build(CnnConfig::new((3, 32, 32), 4, 1)))),
        ("vit", Model::Vit(Vit::build(VitConfig::new((3, 32, 32), 4, 2)).unwrap())),
    ] {
        println!("{name}: {} params", model.num_params());
        for comp in [Components::MAGNITUDE, Components::PHASE, Components::PIXEL] {
            let mut cfg = AttackConfig::new(1.0, comp);
            cfg.max_iterations = 100;
            let t0 = Instant::now();
            let r = optimize_attack(&x, 0, &model, &cfg).unwrap();
            let dt = t0.elapsed();
            println!(
                "  {}: {} iters in {:?} ({:.2} ms/iter), success={}",
                comp.label(),
                r.iterations,
                dt,
                dt.as_secs_f64() * 1000.0 / r.iterations as f64,
                r.success
            );
        }
    }
}
