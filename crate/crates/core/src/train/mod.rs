//! Toy-scale supervised training: cross-entropy, exact gradients, Adam.

mod backward;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ParameterSet};

pub use backward::{backward, loss_and_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate for fine-tuning pretrained weights.
    pub fn fine_tune() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed as a no-op run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_label(logits: &[f32], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

fn log_sum_exp(logits: &[f32]) -> f64 {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    m + logits.iter().map(|&l| (l as f64 - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<f32> {
    check_label(logits, label)?;
    Ok((log_sum_exp(logits) - logits[label] as f64).max(0.0) as f32)
}

/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f32], label: usize) -> Result<Vec<f32>> {
    check_label(logits, label)?;
    let lse = log_sum_exp(logits);
    Ok(logits
        .iter()
        .enumerate()
        .map(|(i, &l)| ((l as f64 - lse).exp() - if i == label { 1.0 } else { 0.0 }) as f32)
        .collect())
}

pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and mean gradient over `batch`. Per-example gradients run in
/// parallel and are summed in index order, so the result does not depend on
/// the thread count.
pub fn batch_gradient(batch: &[&Example], cfg: &ModelConfig, params: &ParameterSet) -> Result<(f32, ParameterSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per: Vec<(f32, ParameterSet)> = batch
        .par_iter()
        .map(|ex| loss_and_grad(&ex.image, ex.label, cfg, params))
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0f64;
    for (l, g) in &per {
        loss += *l as f64;
        for ((_, acc), (_, t)) in total.iter_mut().zip(g.iter()) {
            for (a, v) in acc.as_f32_mut()?.iter_mut().zip(t.as_f32()?) {
                *a += v;
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for (_, t) in total.iter_mut() {
        t.as_f32_mut()?.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(((loss / batch.len() as f64) as f32, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("gradient/state layout does not match parameters"));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = cfg.learning_rate as f64;
    let eps = cfg.eps as f64;
    let iter = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((name, p), (gname, g)), ((_, m), (_, v))) in iter {
        if name != gname || p.shape() != g.shape() {
            return Err(Error::dim(format!("gradient for {gname} does not match {name}")));
        }
        let (p, g, m, v) = (p.as_f32_mut()?, g.as_f32()?, m.as_f32_mut()?, v.as_f32_mut()?);
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p[i] = (p[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_accuracy: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: ParameterSet,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

pub fn accuracy(examples: &[Example], cfg: &ModelConfig, params: &ParameterSet) -> Result<f32> {
    if examples.is_empty() {
        return Err(Error::Dataset("empty evaluation split".into()));
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|ex| Ok(argmax(&forward(&ex.image, cfg, params)?) == ex.label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f32 / examples.len() as f32)
}

/// Train from a seeded initialization for a fixed epoch budget, keeping the
/// best-validation checkpoint (earliest epoch on ties).
pub fn train_loop(
    train: &[Example],
    val: &[Example],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("train and val splits must be non-empty".into()));
    }
    let params = ParameterSet::init(cfg, tcfg.seed)?;
    train_from(params, train, val, cfg, tcfg)
}

pub fn train_from(
    mut params: ParameterSet,
    train: &[Example],
    val: &[Example],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("train and val splits must be non-empty".into()));
    }
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(f32, usize, ParameterSet)> = None;
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&batch, cfg, &params)?;
            loss_sum += loss as f64 * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state, tcfg)?;
        }
        let train_loss = (loss_sum / train.len() as f64) as f32;
        let val_accuracy = accuracy(val, cfg, &params)?;
        log::info!("epoch {epoch}: train_loss {train_loss:.4} val_accuracy {val_accuracy:.4}");
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        metrics,
    })
}

pub fn save_metrics(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(metrics)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 4, 10] {
            let l = cross_entropy(&vec![0.3; k], 1).unwrap();
            assert!((l as f64 - (k as f64).ln()).abs() < 1e-6);
        }
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn confident_logits_give_small_loss() {
        assert!(cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-6);
        assert!(cross_entropy(&[1000.0, -1000.0], 1).unwrap().is_finite());
    }

    #[test]
    fn ce_grad_matches_finite_differences() {
        let logits = [0.2f32, -1.3, 0.7, 2.1];
        let g = cross_entropy_grad(&logits, 2).unwrap();
        for i in 0..4 {
            let h = 1e-3f64;
            let f = |d: f64| {
                let l: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
                let mut l2 = l.clone();
                l2[i] += d;
                let m = l2.iter().cloned().fold(f64::MIN, f64::max);
                m + l2.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - l2[2]
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g[i] as f64).abs() < 1e-6);
        }
    }

    fn ex(cfg: &ModelConfig, seed: u32, label: usize) -> Example {
        let n = cfg.image_size * cfg.image_size * 3;
        let data = (0..n).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0).collect();
        Example {
            image: Tensor::from_f32(vec![cfg.image_size, cfg.image_size, 3], data).unwrap(),
            label,
        }
    }

    #[test]
    fn duplicated_example_batch_equals_single() {
        let cfg = ModelConfig::micro();
        let params = ParameterSet::init(&cfg, 1).unwrap();
        let e = ex(&cfg, 5, 1);
        let (l1, g1) = batch_gradient(&[&e], &cfg, &params).unwrap();
        let (l2, g2) = batch_gradient(&[&e, &e], &cfg, &params).unwrap();
        assert_eq!(l1, l2);
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_grads_and_zero_lr_leave_params() {
        let cfg = ModelConfig::micro();
        let mut params = ParameterSet::init(&cfg, 1).unwrap();
        let orig = params.clone();
        let mut state = AdamState::new(&params);
        let zeros = params.zeros_like();
        adam_step(&mut params, &zeros, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params, orig);
        let e = ex(&cfg, 3, 0);
        let g = backward(&e.image, e.label, &cfg, &params).unwrap();
        let lr0 = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        adam_step(&mut params, &g, &mut state, &lr0).unwrap();
        assert_eq!(params, orig);
    }

    #[test]
    fn first_adam_step_is_lr_sign() {
        let cfg = ModelConfig::micro();
        let mut params = ParameterSet::zeros(&cfg).unwrap();
        let mut grads = params.zeros_like();
        for (i, (_, t)) in grads.iter_mut().enumerate() {
            t.as_f32_mut().unwrap().fill(if i % 2 == 0 { 0.37 } else { -2.5 });
        }
        let tcfg = TrainConfig {
            eps: 0.0,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &tcfg).unwrap();
        for (i, (_, t)) in params.iter().enumerate() {
            let want = if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!(t.as_f32().unwrap().iter().all(|&v| (v - want).abs() < 1e-9));
        }
    }

    #[test]
    fn dead_head_row_gets_no_weight_gradient_when_input_is_zero() {
        // With final_norm gamma = beta = 0 the head input is zero, so the head
        // weight gradient vanishes.
        let cfg = ModelConfig::micro();
        let mut params = ParameterSet::init(&cfg, 2).unwrap();
        params.get_mut("final_norm.gamma").unwrap().fill(0.0);
        let e = ex(&cfg, 9, 2);
        let g = backward(&e.image, e.label, &cfg, &params).unwrap();
        assert!(g.get("head.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get("stage0.block0.qkv.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get("head.bias").unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn one_epoch_lr_zero_returns_init_and_is_deterministic() {
        let cfg = ModelConfig::micro();
        let train: Vec<Example> = (0..6).map(|i| ex(&cfg, i, i as usize % 3)).collect();
        let val: Vec<Example> = (10..13).map(|i| ex(&cfg, i, i as usize % 3)).collect();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train_loop(&train, &val, &cfg, &tcfg).unwrap();
        assert_eq!(out.params, ParameterSet::init(&cfg, 3).unwrap());
        let tcfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_loop(&train, &val, &cfg, &tcfg).unwrap();
        let b = train_loop(&train, &val, &cfg, &tcfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        assert!(train_loop(&[], &val, &cfg, &tcfg).is_err());
    }
}
