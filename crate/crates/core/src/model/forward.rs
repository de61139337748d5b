//! Forward pass. The internal functions can record the intermediates that
//! backpropagation needs, so training and inference share one code path.

use crate::error::{Error, Result};
use crate::model::window::{
    build_shift_mask, gather_rows, scatter_add_rows, window_token_order, AttentionMask,
};
use crate::model::{block_prefix, ModelConfig, ParameterSet};
use crate::tensor::ops::{axpy, dot, gelu_inplace, layernorm_rows_with_stats, linear, softmax_rows, NormStats, LAYERNORM_EPS};
use crate::tensor::Tensor;

/// Callbacks invoked at every activation site of the forward pass.
pub trait ForwardHooks {
    /// Whether `observe` should be called at all.
    fn observing(&self) -> bool {
        false
    }

    /// Values entering `site`, laid out as rows of `channels`.
    fn observe(&mut self, site: &str, values: &[f32], channels: usize) -> Result<()> {
        let _ = (site, values, channels);
        Ok(())
    }

    /// Applied to every intermediate buffer after it is produced.
    fn boundary(&mut self, values: &mut [f32]) {
        let _ = values;
    }
}

pub struct NoHooks;

impl ForwardHooks for NoHooks {}

fn observe(hooks: &mut dyn ForwardHooks, site: impl FnOnce() -> String, v: &[f32], c: usize) -> Result<()> {
    if hooks.observing() {
        hooks.observe(&site(), v, c)?;
    }
    Ok(())
}

/// Borrowed weights of one attention module.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub qkv_weight: &'a [f32],
    pub qkv_bias: &'a [f32],
    pub proj_weight: &'a [f32],
    pub proj_bias: &'a [f32],
}

impl<'a> AttentionWeights<'a> {
    pub fn from_params(params: &'a ParameterSet, prefix: &str) -> Result<Self> {
        Ok(AttentionWeights {
            qkv_weight: params.get(&format!("{prefix}.qkv.weight"))?,
            qkv_bias: params.get(&format!("{prefix}.qkv.bias"))?,
            proj_weight: params.get(&format!("{prefix}.proj.weight"))?,
            proj_bias: params.get(&format!("{prefix}.proj.bias"))?,
        })
    }
}

pub(crate) struct AttnCache {
    /// Attention input in windowed order, `[rows, c]`.
    pub input: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// Softmax output `[windows, heads, n, n]`.
    pub probs: Vec<f32>,
    /// Concatenated head outputs before the projection.
    pub ctx: Vec<f32>,
}

pub(crate) struct BlockCache {
    pub order: Vec<usize>,
    pub x_in: Vec<f32>,
    pub ln1: NormStats,
    pub attn: AttnCache,
    pub x_mid: Vec<f32>,
    pub ln2: NormStats,
    pub h2: Vec<f32>,
    pub m1_pre: Vec<f32>,
    pub m1_act: Vec<f32>,
}

pub(crate) struct MergeCache {
    pub gathered: Vec<f32>,
    pub stats: NormStats,
    pub normed: Vec<f32>,
}

/// Everything the backward pass needs from one forward.
pub(crate) struct ForwardTrace {
    pub patches: Vec<f32>,
    pub blocks: Vec<BlockCache>,
    pub merges: Vec<MergeCache>,
    pub tokens: usize,
    pub pooled: Vec<f32>,
    pub final_stats: NormStats,
    pub final_normed: Vec<f32>,
}

/// Flatten every `p x p x C` patch in `(ky, kx, channel)` order: `[tokens, p*p*C]`.
pub fn extract_patches(image: &Tensor, cfg: &ModelConfig) -> Result<Vec<f32>> {
    let s = cfg.image_size;
    let ch = cfg.in_channels;
    if image.shape() != [s, s, ch] {
        return Err(Error::dim(format!(
            "image shape {:?}, expected [{s}, {s}, {ch}]",
            image.shape()
        )));
    }
    let px = image.as_f32()?;
    let p = cfg.patch_size;
    let g = s / p;
    let mut out = Vec::with_capacity(s * s * ch);
    for pr in 0..g {
        for pc in 0..g {
            for ky in 0..p {
                let row = (pr * p + ky) * s + pc * p;
                out.extend_from_slice(&px[row * ch..][..p * ch]);
            }
        }
    }
    Ok(out)
}

/// `[H/p * W/p, C]` patch tokens.
pub fn patch_embed(image: &Tensor, cfg: &ModelConfig, params: &ParameterSet) -> Result<Tensor> {
    let patches = extract_patches(image, cfg)?;
    let tokens = embed_patches(&patches, cfg, params, &mut NoHooks)?;
    Tensor::from_f32(vec![tokens.len() / cfg.embed_dim, cfg.embed_dim], tokens)
}

fn embed_patches(
    patches: &[f32],
    cfg: &ModelConfig,
    params: &ParameterSet,
    hooks: &mut dyn ForwardHooks,
) -> Result<Vec<f32>> {
    let pd = cfg.patch_dim();
    observe(hooks, || "patch_embed.in".into(), patches, pd)?;
    let mut x = linear(
        patches,
        patches.len() / pd,
        params.get("patch_embed.weight")?,
        cfg.embed_dim,
        Some(params.get("patch_embed.bias")?),
    );
    hooks.boundary(&mut x);
    Ok(x)
}

/// Multi-head attention over windowed tokens `[nW, n, C]`.
pub fn window_attention(
    x: &Tensor,
    weights: &AttentionWeights,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    let (nw, n, c) = match *x.shape() {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::dim(format!("expected [nW, N, C], got {:?}", x.shape()))),
    };
    let (out, _) = attention_core(x.as_f32()?, nw, n, c, heads, weights, mask, &mut NoHooks, "", false)?;
    Tensor::from_f32(vec![nw, n, c], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_core(
    input: &[f32],
    nw: usize,
    n: usize,
    c: usize,
    heads: usize,
    w: &AttentionWeights,
    mask: Option<&AttentionMask>,
    hooks: &mut dyn ForwardHooks,
    prefix: &str,
    record: bool,
) -> Result<(Vec<f32>, Option<AttnCache>)> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(format!("{c} channels not divisible by {heads} heads")));
    }
    if w.qkv_weight.len() != 3 * c * c
        || w.qkv_bias.len() != 3 * c
        || w.proj_weight.len() != c * c
        || w.proj_bias.len() != c
    {
        return Err(Error::dim(format!("attention weights do not match {c} channels")));
    }
    if let Some(m) = mask {
        if m.num_windows != nw || m.tokens != n {
            return Err(Error::dim(format!(
                "mask is [{}, {}], attention has {nw} windows of {n}",
                m.num_windows, m.tokens
            )));
        }
    }
    let rows = nw * n;
    let d = c / heads;
    observe(hooks, || format!("{prefix}.qkv.in"), input, c)?;
    let mut qkv = linear(input, rows, w.qkv_weight, 3 * c, Some(w.qkv_bias));
    hooks.boundary(&mut qkv);
    let mut q = Vec::with_capacity(rows * c);
    let mut k = Vec::with_capacity(rows * c);
    let mut v = Vec::with_capacity(rows * c);
    for r in qkv.chunks_exact(3 * c) {
        q.extend_from_slice(&r[..c]);
        k.extend_from_slice(&r[c..2 * c]);
        v.extend_from_slice(&r[2 * c..]);
    }
    observe(hooks, || format!("{prefix}.q"), &q, c)?;
    observe(hooks, || format!("{prefix}.k"), &k, c)?;
    observe(hooks, || format!("{prefix}.v"), &v, c)?;

    let scale = 1.0 / (d as f32).sqrt();
    let mut probs = vec![0.0f32; nw * heads * n * n];
    for win in 0..nw {
        for h in 0..heads {
            let block = &mut probs[(win * heads + h) * n * n..][..n * n];
            for i in 0..n {
                let qi = &q[(win * n + i) * c + h * d..][..d];
                for j in 0..n {
                    let kj = &k[(win * n + j) * c + h * d..][..d];
                    block[i * n + j] = dot(qi, kj) * scale;
                }
            }
        }
    }
    hooks.boundary(&mut probs);
    for win in 0..nw {
        for h in 0..heads {
            let block = &mut probs[(win * heads + h) * n * n..][..n * n];
            if let Some(m) = mask {
                for (s, b) in block.iter_mut().zip(m.window(win)) {
                    *s += b;
                }
            }
            softmax_rows(block, n);
        }
    }
    hooks.boundary(&mut probs);
    observe(hooks, || format!("{prefix}.attn"), &probs, n)?;

    let mut ctx = vec![0.0f32; rows * c];
    for win in 0..nw {
        for h in 0..heads {
            let block = &probs[(win * heads + h) * n * n..][..n * n];
            for i in 0..n {
                let out = &mut ctx[(win * n + i) * c + h * d..][..d];
                for j in 0..n {
                    axpy(out, block[i * n + j], &v[(win * n + j) * c + h * d..][..d]);
                }
            }
        }
    }
    hooks.boundary(&mut ctx);
    observe(hooks, || format!("{prefix}.proj.in"), &ctx, c)?;
    let mut out = linear(&ctx, rows, w.proj_weight, c, Some(w.proj_bias));
    hooks.boundary(&mut out);
    let cache = record.then(|| AttnCache {
        input: input.to_vec(),
        q,
        k,
        v,
        probs,
        ctx,
    });
    Ok((out, cache))
}

/// One transformer block on tokens `x` (`[grid * grid, C]`), in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward(
    x: &mut [f32],
    grid: usize,
    cfg: &ModelConfig,
    params: &ParameterSet,
    stage: usize,
    block: usize,
    shift: usize,
    hooks: &mut dyn ForwardHooks,
    record: bool,
) -> Result<Option<BlockCache>> {
    let c = cfg.stage_dim(stage);
    let win = cfg.window_size;
    let p = block_prefix(stage, block);
    let x_in = record.then(|| x.to_vec());

    observe(hooks, || format!("{p}.ln1.in"), x, c)?;
    let (mut h, ln1) = layernorm_rows_with_stats(
        x,
        c,
        params.get(&format!("{p}.ln1.weight"))?,
        params.get(&format!("{p}.ln1.bias"))?,
        LAYERNORM_EPS,
    );
    hooks.boundary(&mut h);
    let order = window_token_order(grid, grid, win, shift)?;
    let mask = if shift > 0 {
        Some(build_shift_mask(grid, grid, win, shift)?)
    } else {
        None
    };
    let hw = gather_rows(&h, c, &order);
    let weights = AttentionWeights::from_params(params, &p)?;
    let n = win * win;
    let (y, attn) = attention_core(
        &hw,
        order.len() / n,
        n,
        c,
        cfg.num_heads[stage],
        &weights,
        mask.as_ref(),
        hooks,
        &p,
        record,
    )?;
    scatter_add_rows(x, &y, c, &order);
    hooks.boundary(x);
    let x_mid = record.then(|| x.to_vec());

    observe(hooks, || format!("{p}.ln2.in"), x, c)?;
    let (mut h2, ln2) = layernorm_rows_with_stats(
        x,
        c,
        params.get(&format!("{p}.ln2.weight"))?,
        params.get(&format!("{p}.ln2.bias"))?,
        LAYERNORM_EPS,
    );
    hooks.boundary(&mut h2);
    observe(hooks, || format!("{p}.mlp1.in"), &h2, c)?;
    let rows = grid * grid;
    let hidden = cfg.mlp_hidden(stage);
    let mut m1 = linear(
        &h2,
        rows,
        params.get(&format!("{p}.mlp1.weight"))?,
        hidden,
        Some(params.get(&format!("{p}.mlp1.bias"))?),
    );
    hooks.boundary(&mut m1);
    let m1_pre = record.then(|| m1.clone());
    gelu_inplace(&mut m1);
    hooks.boundary(&mut m1);
    observe(hooks, || format!("{p}.mlp2.in"), &m1, hidden)?;
    let mut m2 = linear(
        &m1,
        rows,
        params.get(&format!("{p}.mlp2.weight"))?,
        c,
        Some(params.get(&format!("{p}.mlp2.bias"))?),
    );
    hooks.boundary(&mut m2);
    for (a, b) in x.iter_mut().zip(&m2) {
        *a += b;
    }
    hooks.boundary(x);

    Ok(if record {
        Some(BlockCache {
            order,
            x_in: x_in.expect("recorded"),
            ln1,
            attn: attn.expect("recorded"),
            x_mid: x_mid.expect("recorded"),
            ln2,
            h2,
            m1_pre: m1_pre.expect("recorded"),
            m1_act: m1,
        })
    } else {
        None
    })
}

fn grid_tokens(x: &Tensor, c: usize) -> Result<usize> {
    match *x.shape() {
        [h, w, cc] if h == w && cc == c => Ok(h),
        _ => Err(Error::dim(format!("expected a square [H, H, {c}] grid, got {:?}", x.shape()))),
    }
}

/// One block with an explicit shift on a `[H', W', C]` grid.
pub fn swin_block(
    x: &Tensor,
    cfg: &ModelConfig,
    params: &ParameterSet,
    stage: usize,
    block: usize,
    shift: usize,
) -> Result<Tensor> {
    if stage >= cfg.num_stages() || block >= cfg.depths[stage] {
        return Err(Error::InvalidArgument(format!("no block {block} in stage {stage}")));
    }
    if shift >= cfg.window_size {
        return Err(Error::InvalidArgument(format!(
            "shift {shift} must be below window {}",
            cfg.window_size
        )));
    }
    let c = cfg.stage_dim(stage);
    let grid = grid_tokens(x, c)?;
    let mut data = x.as_f32()?.to_vec();
    block_forward(&mut data, grid, cfg, params, stage, block, shift, &mut NoHooks, false)?;
    Tensor::from_f32(x.shape().to_vec(), data)
}

/// Blocks `2 * pair` (unshifted) and `2 * pair + 1` (shifted by half a window).
pub fn swin_block_pair(
    x: &Tensor,
    cfg: &ModelConfig,
    params: &ParameterSet,
    stage: usize,
    pair: usize,
) -> Result<Tensor> {
    let y = swin_block(x, cfg, params, stage, 2 * pair, cfg.block_shift(2 * pair))?;
    swin_block(&y, cfg, params, stage, 2 * pair + 1, cfg.block_shift(2 * pair + 1))
}

/// Concatenate 2x2 neighbourhoods as (0,0), (1,0), (0,1), (1,1) in (row, col).
pub(crate) fn merge_gather(x: &[f32], grid: usize, c: usize) -> Vec<f32> {
    let half = grid / 2;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..half {
        for col in 0..half {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let t = (2 * r + dr) * grid + 2 * col + dc;
                out.extend_from_slice(&x[t * c..][..c]);
            }
        }
    }
    out
}

pub(crate) fn merge_forward(
    x: &[f32],
    grid: usize,
    c: usize,
    params: &ParameterSet,
    stage: usize,
    hooks: &mut dyn ForwardHooks,
    record: bool,
) -> Result<(Vec<f32>, Option<MergeCache>)> {
    if grid % 2 != 0 {
        return Err(Error::dim(format!("cannot merge odd grid {grid}")));
    }
    let gathered = merge_gather(x, grid, c);
    observe(hooks, || format!("stage{stage}.merge.norm.in"), &gathered, 4 * c)?;
    let (mut normed, stats) = layernorm_rows_with_stats(
        &gathered,
        4 * c,
        params.get(&format!("stage{stage}.merge.norm.weight"))?,
        params.get(&format!("stage{stage}.merge.norm.bias"))?,
        LAYERNORM_EPS,
    );
    hooks.boundary(&mut normed);
    observe(hooks, || format!("stage{stage}.merge.reduce.in"), &normed, 4 * c)?;
    let mut out = linear(
        &normed,
        gathered.len() / (4 * c),
        params.get(&format!("stage{stage}.merge.reduce.weight"))?,
        2 * c,
        None,
    );
    hooks.boundary(&mut out);
    let cache = record.then(|| MergeCache {
        gathered,
        stats,
        normed,
    });
    Ok((out, cache))
}

/// `[H', W', C]` to `[H'/2, W'/2, 2C]`.
pub fn patch_merge(x: &Tensor, params: &ParameterSet, stage: usize) -> Result<Tensor> {
    let (h, w, c) = match *x.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim(format!("expected [H, W, C], got {:?}", x.shape()))),
    };
    if h != w || h % 2 != 0 {
        return Err(Error::dim(format!("cannot merge a {h}x{w} grid")));
    }
    let (out, _) = merge_forward(x.as_f32()?, h, c, params, stage, &mut NoHooks, false)?;
    Tensor::from_f32(vec![h / 2, w / 2, 2 * c], out)
}

pub fn forward(image: &Tensor, cfg: &ModelConfig, params: &ParameterSet) -> Result<Vec<f32>> {
    Ok(run(image, cfg, params, &mut NoHooks, false)?.0)
}

pub fn forward_with_hooks(
    image: &Tensor,
    cfg: &ModelConfig,
    params: &ParameterSet,
    hooks: &mut dyn ForwardHooks,
) -> Result<Vec<f32>> {
    Ok(run(image, cfg, params, hooks, false)?.0)
}

pub(crate) fn forward_traced(
    image: &Tensor,
    cfg: &ModelConfig,
    params: &ParameterSet,
) -> Result<(Vec<f32>, ForwardTrace)> {
    let (logits, trace) = run(image, cfg, params, &mut NoHooks, true)?;
    Ok((logits, trace.expect("recorded")))
}

fn run(
    image: &Tensor,
    cfg: &ModelConfig,
    params: &ParameterSet,
    hooks: &mut dyn ForwardHooks,
    record: bool,
) -> Result<(Vec<f32>, Option<ForwardTrace>)> {
    let patches = extract_patches(image, cfg)?;
    let mut x = embed_patches(&patches, cfg, params, hooks)?;
    let mut blocks = Vec::new();
    let mut merges = Vec::new();
    let mut grid = cfg.image_size / cfg.patch_size;
    for stage in 0..cfg.num_stages() {
        for block in 0..cfg.depths[stage] {
            let shift = cfg.block_shift(block);
            if let Some(cache) = block_forward(&mut x, grid, cfg, params, stage, block, shift, hooks, record)? {
                blocks.push(cache);
            }
        }
        if stage + 1 < cfg.num_stages() {
            let (y, cache) = merge_forward(&x, grid, cfg.stage_dim(stage), params, stage, hooks, record)?;
            x = y;
            grid /= 2;
            merges.extend(cache);
        }
    }
    let c = cfg.final_dim();
    let tokens = grid * grid;
    let mut pooled = vec![0.0f32; c];
    for row in x.chunks_exact(c) {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    let inv = 1.0 / tokens as f32;
    pooled.iter_mut().for_each(|p| *p *= inv);
    hooks.boundary(&mut pooled);
    observe(hooks, || "final_norm.in".into(), &pooled, c)?;
    let (mut normed, final_stats) = layernorm_rows_with_stats(
        &pooled,
        c,
        params.get("final_norm.gamma")?,
        params.get("final_norm.beta")?,
        LAYERNORM_EPS,
    );
    hooks.boundary(&mut normed);
    observe(hooks, || "head.in".into(), &normed, c)?;
    let mut logits = linear(
        &normed,
        1,
        params.get("head.weight")?,
        cfg.num_classes,
        Some(params.get("head.bias")?),
    );
    hooks.boundary(&mut logits);
    let trace = record.then(|| ForwardTrace {
        patches,
        blocks,
        merges,
        tokens,
        pooled,
        final_stats,
        final_normed: normed,
    });
    Ok((logits, trace))
}

/// Activation sites visited by the forward pass, in order, with their row width.
pub fn activation_sites(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut sites = vec![("patch_embed.in".to_string(), cfg.patch_dim())];
    for stage in 0..cfg.num_stages() {
        let c = cfg.stage_dim(stage);
        let n = cfg.window_size * cfg.window_size;
        for block in 0..cfg.depths[stage] {
            let p = block_prefix(stage, block);
            for (s, w) in [
                ("ln1.in", c),
                ("qkv.in", c),
                ("q", c),
                ("k", c),
                ("v", c),
                ("attn", n),
                ("proj.in", c),
                ("ln2.in", c),
                ("mlp1.in", c),
                ("mlp2.in", cfg.mlp_hidden(stage)),
            ] {
                sites.push((format!("{p}.{s}"), w));
            }
        }
        if stage + 1 < cfg.num_stages() {
            sites.push((format!("stage{stage}.merge.norm.in"), 4 * c));
            sites.push((format!("stage{stage}.merge.reduce.in"), 4 * c));
        }
    }
    sites.push(("final_norm.in".to_string(), cfg.final_dim()));
    sites.push(("head.in".to_string(), cfg.final_dim()));
    sites
}
