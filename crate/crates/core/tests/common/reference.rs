//! Straightforward f64 re-implementation of the classifier, written from the
//! definitions (explicit torus shift, region-id masks, per-window loops) and
//! sharing no code with the library forward.
//!
//! The network is a list of layers so finite differences can restart from the
//! layer that owns a perturbed parameter.

use std::collections::HashMap;

use swinq::model::{ModelConfig, ParameterSet};

/// f64 copy of a parameter set. Matrices are also kept transposed to
/// `[in, out]`, so both copies must be written through `set`.
pub struct Params {
    values: HashMap<String, Vec<f64>>,
    transposed: HashMap<String, (usize, Vec<f64>)>,
}

impl<Q: AsRef<str> + ?Sized> std::ops::Index<&Q> for Params {
    type Output = Vec<f64>;
    fn index(&self, name: &Q) -> &Vec<f64> {
        &self.values[name.as_ref()]
    }
}

impl Params {
    pub fn set(&mut self, name: &str, i: usize, v: f64) {
        self.values.get_mut(name).unwrap()[i] = v;
        if let Some((inp, t)) = self.transposed.get_mut(name) {
            let out = t.len() / *inp;
            t[(i % *inp) * out + i / *inp] = v;
        }
    }
}

fn transpose(w: &[f64], out: usize, inp: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for o in 0..out {
        for i in 0..inp {
            t[i * out + o] = w[o * inp + i];
        }
    }
    t
}

pub fn to_f64(params: &ParameterSet) -> Params {
    let mut values = HashMap::new();
    let mut transposed = HashMap::new();
    for (n, t) in params.iter() {
        let v: Vec<f64> = t.as_f32().unwrap().iter().map(|&v| v as f64).collect();
        if let [out, inp] = t.shape()[..] {
            transposed.insert(n.to_string(), (inp, transpose(&v, out, inp)));
        }
        values.insert(n.to_string(), v);
    }
    Params { values, transposed }
}

/// `x W^T + b` with `W = p[{name}.weight]` and the bias when present.
fn linear(p: &Params, x: &[f64], name: &str, out: usize) -> Vec<f64> {
    let wn = format!("{name}.weight");
    let (inp, wt) = &p.transposed[&wn];
    let b = p.values.get(&format!("{name}.bias")).map(|b| b.as_slice());
    debug_assert_eq!(wt.len(), inp * out);
    affine(x, *inp, &p.values[&wn], wt, b, out)
}

#[derive(Debug, Clone)]
pub enum Layer {
    Embed,
    /// LayerNorm, windowed attention and projection, plus the residual.
    Attention { stage: usize, block: usize },
    /// LayerNorm and MLP, plus the residual.
    Mlp { stage: usize, block: usize },
    Merge { stage: usize },
    Head,
}

impl Layer {
    pub fn owns(&self, name: &str) -> bool {
        let in_block = |stage: usize, block: usize, parts: [&str; 3]| {
            parts
                .iter()
                .any(|m| name.starts_with(&format!("stage{stage}.block{block}.{m}.")))
        };
        match *self {
            Layer::Embed => name.starts_with("patch_embed."),
            Layer::Attention { stage, block } => in_block(stage, block, ["ln1", "qkv", "proj"]),
            Layer::Mlp { stage, block } => in_block(stage, block, ["ln2", "mlp1", "mlp2"]),
            Layer::Merge { stage } => name.starts_with(&format!("stage{stage}.merge.")),
            Layer::Head => name.starts_with("final_norm.") || name.starts_with("head."),
        }
    }
}

pub fn layers(cfg: &ModelConfig) -> Vec<Layer> {
    let mut out = vec![Layer::Embed];
    for stage in 0..cfg.depths.len() {
        for block in 0..cfg.depths[stage] {
            out.push(Layer::Attention { stage, block });
            out.push(Layer::Mlp { stage, block });
        }
        if stage + 1 < cfg.depths.len() {
            out.push(Layer::Merge { stage });
        }
    }
    out.push(Layer::Head);
    out
}

/// Activation passed between layers: a square token grid `[grid*grid, channels]`.
/// The raw image and the logits use `grid = 0`.
#[derive(Debug, Clone)]
pub struct State {
    pub grid: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

fn layer_norm_rows(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let c = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]));
    }
    out
}

// Sixteen independent partial sums keep the loop from being latency-bound.
#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..16 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline(always)]
fn affine_body(x: &[f64], inp: usize, w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len() / inp * out);
    for row in x.chunks_exact(inp) {
        for o in 0..out {
            y.push(dot_body(row, &w[o * inp..(o + 1) * inp]) + b.map_or(0.0, |b| b[o]));
        }
    }
    y
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn affine_fma(x: &[f64], inp: usize, w: &[f64], wt: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let rows = x.len() / inp;
    let mut y = vec![0.0f64; rows * out];
    let ob = out / 8 * 8;
    let rb = rows / 4 * 4;
    // 4 rows x 8 outputs held in registers, reduced over the input dim
    for r in (0..rb).step_by(4) {
        for o in (0..ob).step_by(8) {
            use std::arch::x86_64::*;
            // SAFETY: every load and store stays inside `x`, `wt` and `y`,
            // whose lengths were fixed above.
            unsafe {
                let mut acc = [_mm256_setzero_pd(); 8];
                for i in 0..inp {
                    let w0 = _mm256_loadu_pd(wt.as_ptr().add(i * out + o));
                    let w1 = _mm256_loadu_pd(wt.as_ptr().add(i * out + o + 4));
                    for k in 0..4 {
                        let xv = _mm256_set1_pd(*x.get_unchecked((r + k) * inp + i));
                        acc[2 * k] = _mm256_fmadd_pd(xv, w0, acc[2 * k]);
                        acc[2 * k + 1] = _mm256_fmadd_pd(xv, w1, acc[2 * k + 1]);
                    }
                }
                for k in 0..4 {
                    let dst = y.as_mut_ptr().add((r + k) * out + o);
                    _mm256_storeu_pd(dst, acc[2 * k]);
                    _mm256_storeu_pd(dst.add(4), acc[2 * k + 1]);
                }
            }
        }
    }
    for r in 0..rows {
        let lo = if r < rb { ob } else { 0 };
        for o in lo..out {
            y[r * out + o] = dot_body(&x[r * inp..(r + 1) * inp], &w[o * inp..(o + 1) * inp]);
        }
    }
    if let Some(b) = b {
        for row in y.chunks_exact_mut(out) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// `x W^T + b` over rows of `x`; `wt` is `W` transposed.
fn affine(x: &[f64], inp: usize, w: &[f64], wt: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: both features were detected at runtime.
            return unsafe { affine_fma(x, inp, w, wt, b, out) };
        }
    }
    affine_body(x, inp, w, b, out)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn embed(image: &[f64], cfg: &ModelConfig, p: &Params) -> State {
    let s = cfg.image_size;
    let ps = cfg.patch_size;
    let g = s / ps;
    let c = cfg.embed_dim;
    let ch = cfg.in_channels;
    let mut patches = Vec::with_capacity(s * s * ch);
    for pr in 0..g {
        for pc in 0..g {
            for ky in 0..ps {
                for kx in 0..ps {
                    for k in 0..ch {
                        patches.push(image[((pr * ps + ky) * s + pc * ps + kx) * ch + k]);
                    }
                }
            }
        }
    }
    State {
        grid: g,
        channels: c,
        data: linear(p, &patches, "patch_embed", c),
    }
}

fn attention_half(x: &State, cfg: &ModelConfig, p: &Params, stage: usize, blk: usize) -> State {
    attention_parts(x, cfg, p, stage, blk).1
}

fn attention_parts(x: &State, cfg: &ModelConfig, p: &Params, stage: usize, blk: usize) -> (Vec<f64>, State) {
    let (g, c) = (x.grid, x.channels);
    let heads = cfg.num_heads[stage];
    let d = c / heads;
    let win = cfg.window_size;
    let shift = if blk % 2 == 1 { win / 2 } else { 0 };
    let pre = format!("stage{stage}.block{blk}");
    let get = |n: &str| &p[&format!("{pre}.{n}")];

    let h = layer_norm_rows(&x.data, get("ln1.weight"), get("ln1.bias"));
    let qkv = linear(p, &h, &format!("{pre}.qkv"), 3 * c);
    let mut ctx = vec![0.0f64; g * g * c];
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0f64; win * win];
    for wi in 0..g / win {
        for wj in 0..g / win {
            // window of the rolled grid, as original token indices and the
            // pre-roll region each token came from
            let mut members = Vec::with_capacity(win * win);
            for a in 0..win {
                for b in 0..win {
                    let (r, cc) = ((wi * win + a + shift) % g, (wj * win + b + shift) % g);
                    members.push((r * g + cc, (r < shift, cc < shift)));
                }
            }
            for hd in 0..heads {
                for &(ti, ri) in &members {
                    let qi = &qkv[ti * 3 * c + hd * d..][..d];
                    for (s, &(tj, rj)) in scores.iter_mut().zip(&members) {
                        *s = dot_body(qi, &qkv[tj * 3 * c + c + hd * d..][..d]) * scale;
                        if shift > 0 && ri != rj {
                            *s -= 1e9;
                        }
                    }
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let out = &mut ctx[ti * c + hd * d..][..d];
                    for (e, &(tj, _)) in scores.iter().zip(&members) {
                        let vj = &qkv[tj * 3 * c + 2 * c + hd * d..][..d];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += e / z * vv;
                        }
                    }
                }
            }
        }
    }
    let y = linear(p, &ctx, &format!("{pre}.proj"), c);
    let out = State {
        grid: g,
        channels: c,
        data: x.data.iter().zip(&y).map(|(a, b)| a + b).collect(),
    };
    (ctx, out)
}

struct MlpParts {
    pre: Vec<f64>,
    hid: Vec<f64>,
    normed: Vec<f64>,
    hidden: usize,
}

fn mlp_parts(x: &State, p: &Params, stage: usize, blk: usize) -> (MlpParts, State) {
    let c = x.channels;
    let name = format!("stage{stage}.block{blk}");
    let get = |n: &str| &p[&format!("{name}.{n}")];
    let hidden = get("mlp1.bias").len();
    let normed = layer_norm_rows(&x.data, get("ln2.weight"), get("ln2.bias"));
    let pre = linear(p, &normed, &format!("{name}.mlp1"), hidden);
    let hid: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let m2 = linear(p, &hid, &format!("{name}.mlp2"), c);
    let out = State {
        grid: x.grid,
        channels: c,
        data: x.data.iter().zip(&m2).map(|(a, b)| a + b).collect(),
    };
    (MlpParts { pre, hid, normed, hidden }, out)
}

fn mlp_half(x: &State, p: &Params, stage: usize, blk: usize) -> State {
    mlp_parts(x, p, stage, blk).1
}

fn merge(x: &State, p: &Params, stage: usize) -> State {
    let (g, c) = (x.grid, x.channels);
    let pre = format!("stage{stage}.merge");
    let mut cat = Vec::with_capacity(x.data.len());
    for r in 0..g / 2 {
        for col in 0..g / 2 {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let t = (2 * r + dr) * g + 2 * col + dc;
                cat.extend_from_slice(&x.data[t * c..(t + 1) * c]);
            }
        }
    }
    let n = layer_norm_rows(&cat, &p[&format!("{pre}.norm.weight")], &p[&format!("{pre}.norm.bias")]);
    State {
        grid: g / 2,
        channels: 2 * c,
        data: linear(p, &n, &format!("{pre}.reduce"), 2 * c),
    }
}

fn head(x: &State, cfg: &ModelConfig, p: &Params) -> Vec<f64> {
    let c = x.channels;
    let t = x.grid * x.grid;
    let pooled: Vec<f64> = (0..c)
        .map(|i| (0..t).map(|k| x.data[k * c + i]).sum::<f64>() / t as f64)
        .collect();
    let n = layer_norm_rows(&pooled, &p["final_norm.gamma"], &p["final_norm.beta"]);
    linear(p, &n, "head", cfg.num_classes)
}

pub fn image_state(image: &[f32]) -> State {
    State {
        grid: 0,
        channels: 0,
        data: image.iter().map(|&v| v as f64).collect(),
    }
}

pub fn apply(layer: &Layer, x: &State, cfg: &ModelConfig, p: &Params) -> State {
    match *layer {
        Layer::Embed => embed(&x.data, cfg, p),
        Layer::Attention { stage, block } => attention_half(x, cfg, p, stage, block),
        Layer::Mlp { stage, block } => mlp_half(x, p, stage, block),
        Layer::Merge { stage } => merge(x, p, stage),
        Layer::Head => State {
            grid: 0,
            channels: cfg.num_classes,
            data: head(x, cfg, p),
        },
    }
}

/// Inputs to every layer, plus the final logits as the last entry.
pub fn forward_states(image: &[f32], cfg: &ModelConfig, p: &Params) -> Vec<State> {
    let mut states = vec![image_state(image)];
    for layer in layers(cfg) {
        let next = apply(&layer, states.last().unwrap(), cfg, p);
        states.push(next);
    }
    states
}

pub fn forward(image: &[f32], cfg: &ModelConfig, p: &Params) -> Vec<f64> {
    forward_states(image, cfg, p).pop().unwrap().data
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() - logits[label]
}

/// Intermediates of one layer, used to redo it cheaply when a single
/// parameter moves.
pub enum LayerCache {
    Mlp { parts: MlpCacheParts, out: State },
    Attention { ctx: Vec<f64>, out: State },
    Other,
}

pub struct MlpCacheParts(MlpParts);

pub fn layer_cache(layer: &Layer, x: &State, cfg: &ModelConfig, p: &Params) -> LayerCache {
    match *layer {
        Layer::Mlp { stage, block } => {
            let (parts, out) = mlp_parts(x, p, stage, block);
            LayerCache::Mlp { parts: MlpCacheParts(parts), out }
        }
        Layer::Attention { stage, block } => {
            let (ctx, out) = attention_parts(x, cfg, p, stage, block);
            LayerCache::Attention { ctx, out }
        }
        _ => LayerCache::Other,
    }
}

/// Layer output with `name[idx]` moved by `delta`, rebuilt from the cache.
/// Only the linear maps after the last normalisation have a shortcut; `None`
/// means the caller must rerun the layer.
pub fn nudged(cache: &LayerCache, p: &Params, name: &str, idx: usize, delta: f64) -> Option<State> {
    let field = name.rsplitn(3, '.').collect::<Vec<_>>();
    let (leaf, module) = (field[0], field.get(1).copied().unwrap_or(""));
    let prefix = field.get(2).copied().unwrap_or("");
    match cache {
        LayerCache::Attention { ctx, out } if module == "proj" => {
            let c = out.channels;
            let mut o = out.clone();
            for t in 0..o.data.len() / c {
                o.data[t * c + if leaf == "bias" { idx } else { idx / c }] +=
                    delta * if leaf == "bias" { 1.0 } else { ctx[t * c + idx % c] };
            }
            Some(o)
        }
        LayerCache::Mlp { parts: MlpCacheParts(m), out } => {
            let c = out.channels;
            let hidden = m.hidden;
            let mut o = out.clone();
            let rows = o.data.len() / c;
            match module {
                "mlp2" => {
                    let (oc, ic) = if leaf == "bias" { (idx, None) } else { (idx / hidden, Some(idx % hidden)) };
                    for t in 0..rows {
                        o.data[t * c + oc] += delta * ic.map_or(1.0, |i| m.hid[t * hidden + i]);
                    }
                }
                "mlp1" => {
                    let (hc, ic) = if leaf == "bias" { (idx, None) } else { (idx / c, Some(idx % c)) };
                    let w2 = &p[&format!("{prefix}.mlp2.weight")];
                    for t in 0..rows {
                        let moved = m.pre[t * hidden + hc] + delta * ic.map_or(1.0, |i| m.normed[t * c + i]);
                        let dh = gelu(moved) - m.hid[t * hidden + hc];
                        for k in 0..c {
                            o.data[t * c + k] += w2[k * hidden + hc] * dh;
                        }
                    }
                }
                _ => return None,
            }
            Some(o)
        }
        _ => None,
    }
}

/// Loss given the output `state` of layer `idx`.
pub fn loss_after(idx: usize, state: &State, cfg: &ModelConfig, p: &Params, label: usize) -> f64 {
    let all = layers(cfg);
    let mut x = state.clone();
    for layer in &all[idx + 1..] {
        x = apply(layer, &x, cfg, p);
    }
    cross_entropy(&x.data, label)
}

/// Loss after restarting the forward at layer `from` with input `state`.
pub fn loss_from(from: usize, state: &State, cfg: &ModelConfig, p: &Params, label: usize) -> f64 {
    let all = layers(cfg);
    let mut x = apply(&all[from], state, cfg, p);
    for layer in &all[from + 1..] {
        x = apply(layer, &x, cfg, p);
    }
    cross_entropy(&x.data, label)
}
