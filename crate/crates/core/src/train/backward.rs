//! Reverse-mode gradients over a recorded forward trace.

use crate::error::{Error, Result};
use crate::model::forward::{forward_traced, AttnCache, BlockCache, ForwardTrace, MergeCache};
use crate::model::{block_prefix, ModelConfig, ParameterSet};
use crate::tensor::ops::{axpy, dot, gelu_grad_scalar, matmul_slices, NormStats};
use crate::tensor::Tensor;

use super::{cross_entropy, cross_entropy_grad};

fn accumulate(grads: &mut ParameterSet, name: &str, g: &[f32]) -> Result<()> {
    let dst = grads.get_mut(name)?;
    for (d, s) in dst.iter_mut().zip(g) {
        *d += s;
    }
    Ok(())
}

/// Backward of `y = x W^T + b` for `x: [rows, inp]`, `W: [out, inp]`.
/// Accumulates dW (and db) into `grads`; returns dx.
fn linear_backward(
    grads: &mut ParameterSet,
    name: &str,
    has_bias: bool,
    x: &[f32],
    rows: usize,
    inp: usize,
    w: &[f32],
    out: usize,
    dy: &[f32],
) -> Result<Vec<f32>> {
    let mut dw = vec![0.0f32; out * inp];
    for r in 0..rows {
        let xr = &x[r * inp..][..inp];
        for o in 0..out {
            let g = dy[r * out + o];
            if g != 0.0 {
                axpy(&mut dw[o * inp..][..inp], g, xr);
            }
        }
    }
    accumulate(grads, &format!("{name}.weight"), &dw)?;
    if has_bias {
        let mut db = vec![0.0f32; out];
        for row in dy.chunks_exact(out) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        accumulate(grads, &format!("{name}.bias"), &db)?;
    }
    Ok(matmul_slices(dy, w, rows, out, inp))
}

/// LayerNorm backward; accumulates dgamma/dbeta under the given names.
#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    grads: &mut ParameterSet,
    gamma_name: &str,
    beta_name: &str,
    gamma: &[f32],
    x: &[f32],
    c: usize,
    stats: &NormStats,
    dy: &[f32],
) -> Result<Vec<f32>> {
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut xhat = vec![0.0f32; c];
    let mut g = vec![0.0f32; c];
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(c)
        .zip(dy.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut a = 0.0f64;
        let mut b = 0.0f64;
        for i in 0..c {
            xhat[i] = (xr[i] - mean) * rstd;
            g[i] = dyr[i] * gamma[i];
            dgamma[i] += dyr[i] * xhat[i];
            dbeta[i] += dyr[i];
            a += g[i] as f64;
            b += (g[i] * xhat[i]) as f64;
        }
        let a = (a / c as f64) as f32;
        let b = (b / c as f64) as f32;
        for i in 0..c {
            dxr[i] = rstd * (g[i] - a - xhat[i] * b);
        }
    }
    accumulate(grads, gamma_name, &dgamma)?;
    accumulate(grads, beta_name, &dbeta)?;
    Ok(dx)
}

/// Backward through attention. `dy` is in windowed order; returns the
/// gradient w.r.t. the attention input (also windowed).
fn attention_backward(
    grads: &mut ParameterSet,
    params: &ParameterSet,
    prefix: &str,
    cache: &AttnCache,
    n: usize,
    c: usize,
    heads: usize,
    dy: &[f32],
) -> Result<Vec<f32>> {
    let rows = dy.len() / c;
    let nw = rows / n;
    let d = c / heads;
    let dctx = linear_backward(
        grads,
        &format!("{prefix}.proj"),
        true,
        &cache.ctx,
        rows,
        c,
        params.get(&format!("{prefix}.proj.weight"))?,
        c,
        dy,
    )?;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dq = vec![0.0f32; rows * c];
    let mut dk = vec![0.0f32; rows * c];
    let mut dv = vec![0.0f32; rows * c];
    let mut ds = vec![0.0f32; n * n];
    for win in 0..nw {
        for h in 0..heads {
            let p = &cache.probs[(win * heads + h) * n * n..][..n * n];
            let off = |i: usize| (win * n + i) * c + h * d;
            for i in 0..n {
                let gi = &dctx[off(i)..][..d];
                for j in 0..n {
                    ds[i * n + j] = dot(gi, &cache.v[off(j)..][..d]);
                    axpy(&mut dv[off(j)..][..d], p[i * n + j], gi);
                }
            }
            for i in 0..n {
                let pr = &p[i * n..][..n];
                let dr = &mut ds[i * n..][..n];
                let s: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv, pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - s) * scale;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let g = ds[i * n + j];
                    if g != 0.0 {
                        axpy(&mut dq[off(i)..][..d], g, &cache.k[off(j)..][..d]);
                        axpy(&mut dk[off(j)..][..d], g, &cache.q[off(i)..][..d]);
                    }
                }
            }
        }
    }
    let mut dqkv = Vec::with_capacity(rows * 3 * c);
    for r in 0..rows {
        dqkv.extend_from_slice(&dq[r * c..][..c]);
        dqkv.extend_from_slice(&dk[r * c..][..c]);
        dqkv.extend_from_slice(&dv[r * c..][..c]);
    }
    linear_backward(
        grads,
        &format!("{prefix}.qkv"),
        true,
        &cache.input,
        rows,
        c,
        params.get(&format!("{prefix}.qkv.weight"))?,
        3 * c,
        &dqkv,
    )
}

/// Returns dx_in given dx_out for one block.
fn block_backward(
    grads: &mut ParameterSet,
    params: &ParameterSet,
    cfg: &ModelConfig,
    stage: usize,
    block: usize,
    cache: &BlockCache,
    dout: &[f32],
) -> Result<Vec<f32>> {
    let c = cfg.stage_dim(stage);
    let hidden = cfg.mlp_hidden(stage);
    let rows = dout.len() / c;
    let p = block_prefix(stage, block);

    // MLP branch
    let dact = linear_backward(
        grads,
        &format!("{p}.mlp2"),
        true,
        &cache.m1_act,
        rows,
        hidden,
        params.get(&format!("{p}.mlp2.weight"))?,
        c,
        dout,
    )?;
    let dpre: Vec<f32> = dact
        .iter()
        .zip(&cache.m1_pre)
        .map(|(g, &x)| g * gelu_grad_scalar(x))
        .collect();
    let dh2 = linear_backward(
        grads,
        &format!("{p}.mlp1"),
        true,
        &cache.h2,
        rows,
        c,
        params.get(&format!("{p}.mlp1.weight"))?,
        hidden,
        &dpre,
    )?;
    let dln2 = layernorm_backward(
        grads,
        &format!("{p}.ln2.weight"),
        &format!("{p}.ln2.bias"),
        params.get(&format!("{p}.ln2.weight"))?,
        &cache.x_mid,
        c,
        &cache.ln2,
        &dh2,
    )?;
    let dmid: Vec<f32> = dout.iter().zip(&dln2).map(|(a, b)| a + b).collect();

    // attention branch, in windowed order
    let mut dy = Vec::with_capacity(dmid.len());
    for &t in &cache.order {
        dy.extend_from_slice(&dmid[t * c..][..c]);
    }
    let n = cfg.window_size * cfg.window_size;
    let dhw = attention_backward(grads, params, &p, &cache.attn, n, c, cfg.num_heads[stage], &dy)?;
    let mut dh = vec![0.0f32; dmid.len()];
    for (pos, &t) in cache.order.iter().enumerate() {
        dh[t * c..][..c].copy_from_slice(&dhw[pos * c..][..c]);
    }
    let dln1 = layernorm_backward(
        grads,
        &format!("{p}.ln1.weight"),
        &format!("{p}.ln1.bias"),
        params.get(&format!("{p}.ln1.weight"))?,
        &cache.x_in,
        c,
        &cache.ln1,
        &dh,
    )?;
    Ok(dmid.iter().zip(&dln1).map(|(a, b)| a + b).collect())
}

fn merge_backward(
    grads: &mut ParameterSet,
    params: &ParameterSet,
    stage: usize,
    c: usize,
    grid: usize,
    cache: &MergeCache,
    dout: &[f32],
) -> Result<Vec<f32>> {
    let rows = dout.len() / (2 * c);
    let dnormed = linear_backward(
        grads,
        &format!("stage{stage}.merge.reduce"),
        false,
        &cache.normed,
        rows,
        4 * c,
        params.get(&format!("stage{stage}.merge.reduce.weight"))?,
        2 * c,
        dout,
    )?;
    let dg = layernorm_backward(
        grads,
        &format!("stage{stage}.merge.norm.weight"),
        &format!("stage{stage}.merge.norm.bias"),
        params.get(&format!("stage{stage}.merge.norm.weight"))?,
        &cache.gathered,
        4 * c,
        &cache.stats,
        &dnormed,
    )?;
    let half = grid / 2;
    let mut dx = vec![0.0f32; grid * grid * c];
    let mut src = dg.chunks_exact(c);
    for r in 0..half {
        for col in 0..half {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let t = (2 * r + dr) * grid + 2 * col + dc;
                dx[t * c..][..c].copy_from_slice(src.next().expect("sized"));
            }
        }
    }
    Ok(dx)
}

fn backward_trace(
    cfg: &ModelConfig,
    params: &ParameterSet,
    trace: &ForwardTrace,
    dlogits: &[f32],
) -> Result<ParameterSet> {
    let mut grads = params.zeros_like();
    let cf = cfg.final_dim();
    let dnormed = linear_backward(
        &mut grads,
        "head",
        true,
        &trace.final_normed,
        1,
        cf,
        params.get("head.weight")?,
        cfg.num_classes,
        dlogits,
    )?;
    let dpooled = layernorm_backward(
        &mut grads,
        "final_norm.gamma",
        "final_norm.beta",
        params.get("final_norm.gamma")?,
        &trace.pooled,
        cf,
        &trace.final_stats,
        &dnormed,
    )?;
    let inv = 1.0 / trace.tokens as f32;
    let mut dx: Vec<f32> = (0..trace.tokens)
        .flat_map(|_| dpooled.iter().map(|g| g * inv))
        .collect();

    let mut blocks = trace.blocks.iter().rev();
    let mut merges = trace.merges.iter().rev();
    for stage in (0..cfg.num_stages()).rev() {
        if stage + 1 < cfg.num_stages() {
            let cache = merges.next().ok_or_else(|| Error::Config("trace is missing a merge".into()))?;
            dx = merge_backward(
                &mut grads,
                params,
                stage,
                cfg.stage_dim(stage),
                cfg.stage_grid(stage),
                cache,
                &dx,
            )?;
        }
        for block in (0..cfg.depths[stage]).rev() {
            let cache = blocks.next().ok_or_else(|| Error::Config("trace is missing a block".into()))?;
            dx = block_backward(&mut grads, params, cfg, stage, block, cache, &dx)?;
        }
    }

    let pd = cfg.patch_dim();
    linear_backward(
        &mut grads,
        "patch_embed",
        true,
        &trace.patches,
        trace.patches.len() / pd,
        pd,
        params.get("patch_embed.weight")?,
        cfg.embed_dim,
        &dx,
    )?;
    Ok(grads)
}

/// Cross-entropy loss and exact parameter gradients for one example.
pub fn loss_and_grad(
    image: &Tensor,
    label: usize,
    cfg: &ModelConfig,
    params: &ParameterSet,
) -> Result<(f32, ParameterSet)> {
    let (logits, trace) = forward_traced(image, cfg, params)?;
    let loss = cross_entropy(&logits, label)?;
    let dlogits = cross_entropy_grad(&logits, label)?;
    Ok((loss, backward_trace(cfg, params, &trace, &dlogits)?))
}

/// Gradient of `cross_entropy(forward(image), label)` w.r.t. every parameter.
pub fn backward(image: &Tensor, label: usize, cfg: &ModelConfig, params: &ParameterSet) -> Result<ParameterSet> {
    Ok(loss_and_grad(image, label, cfg, params)?.1)
}
