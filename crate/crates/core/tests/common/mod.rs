#![allow(dead_code)]

pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinq::model::{ModelConfig, ParameterSet};
use swinq::tensor::Tensor;

pub fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let n = s * s * cfg.in_channels;
    Tensor::from_f32(
        vec![s, s, cfg.in_channels],
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// Parameters with every entry (norms included) drawn uniformly from
/// `[-scale, scale]`, plus 1 on LayerNorm gains, so no path is trivially dead.
pub fn random_params(cfg: &ModelConfig, seed: u64, scale: f32) -> ParameterSet {
    let mut params = ParameterSet::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in params.iter_mut() {
        let gain = name.ends_with("gamma") || (name.contains("ln") || name.contains("norm")) && name.ends_with("weight");
        for v in t.as_f32_mut().unwrap() {
            *v = rng.random_range(-scale..scale) + if gain { 1.0 } else { 0.0 };
        }
    }
    params
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a denominator floor; gradients below the floor are
/// compared in absolute terms scaled by it.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare library gradients against central differences of the f64
/// reference. `select(name, index)` picks which scalars to check.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &ParameterSet,
    image: &Tensor,
    label: usize,
    h: f64,
    floor: f64,
    select: impl Fn(&str, usize) -> bool,
) -> GradCheck {
    let analytic = swinq::train::backward(image, label, cfg, params).unwrap();
    let mut p = reference::to_f64(params);
    let img = image.as_f32().unwrap();
    let states = reference::forward_states(img, cfg, &p);
    let layers = reference::layers(cfg);
    let mut out = GradCheck::default();
    for (li, layer) in layers.iter().enumerate() {
        let names: Vec<String> = params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| layer.owns(n))
            .collect();
        let cache = reference::layer_cache(layer, &states[li], cfg, &p);
        for name in names {
            let grad = analytic.get(&name).unwrap();
            for i in 0..grad.len() {
                if !select(&name, i) {
                    continue;
                }
                let mut eval = |delta: f64| match reference::nudged(&cache, &p, &name, i, delta) {
                    Some(out) => reference::loss_after(li, &out, cfg, &p, label),
                    None => {
                        let orig = p[&name][i];
                        p.set(&name, i, orig + delta);
                        let l = reference::loss_from(li, &states[li], cfg, &p, label);
                        p.set(&name, i, orig);
                        l
                    }
                };
                let (up, down) = (eval(h), eval(-h));
                let fd = (up - down) / (2.0 * h);
                let e = rel_err(grad[i] as f64, fd, floor);
                out.checked += 1;
                if e > out.max_rel {
                    out.max_rel = e;
                    out.worst = format!("{name}[{i}]: analytic {} fd {fd}", grad[i]);
                }
            }
        }
    }
    out
}
