mod common;

use std::time::Instant;

use common::{grad_check, random_image, random_params, reference};
use swinq::model::{forward, ModelConfig};

#[test]
fn reference_forward_agrees_with_library() {
    for (cfg, seed) in [(ModelConfig::micro(), 1), (ModelConfig::tiny(), 2)] {
        let params = random_params(&cfg, seed, 0.3);
        let img = random_image(&cfg, seed + 10);
        let lib = forward(&img, &cfg, &params).unwrap();
        let refr = reference::forward(img.as_f32().unwrap(), &cfg, &reference::to_f64(&params));
        for (a, b) in lib.iter().zip(&refr) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn micro_gradients_exhaustive() {
    let cfg = ModelConfig::micro();
    let params = random_params(&cfg, 3, 0.3);
    let img = random_image(&cfg, 4);
    let t = Instant::now();
    let r = grad_check(&cfg, &params, &img, 1, 1e-3, 1e-3, |_, _| true);
    eprintln!("micro: {} params in {:?}, max rel {:.3e} at {}", r.checked, t.elapsed(), r.max_rel, r.worst);
    assert!(r.max_rel <= 1e-3, "{r:?}");
}

#[test]
fn tiny_gradients_exhaustive() {
    let cfg = ModelConfig::tiny();
    let params = random_params(&cfg, 5, 0.2);
    let img = random_image(&cfg, 6);
    let t = Instant::now();
    let r = grad_check(&cfg, &params, &img, 2, 1e-3, 1e-3, |_, _| true);
    eprintln!("tiny: {} params in {:?}, max rel {:.3e} at {}", r.checked, t.elapsed(), r.max_rel, r.worst);
    assert_eq!(r.checked, cfg_params(&cfg));
    assert!(r.max_rel <= 1e-3, "{r:?}");
}

fn cfg_params(cfg: &ModelConfig) -> usize {
    swinq::model::param_count(cfg)
}
