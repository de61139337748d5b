//! Window tiling, torus shifts and the shifted-window attention mask.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive bias for blocked token pairs. Finite so that softmax never sees NaN.
pub const MASK_NEG: f32 = -1e9;

fn grid_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(format!("expected [H, W, C], got {:?}", x.shape()))),
    }
}

/// Torus roll by `(-s, -s)`: output `(i, j)` reads input `((i + s) % H, (j + s) % W)`.
pub fn cyclic_shift(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(x)?;
    let src = x.as_f32()?;
    let mut out = vec![0.0f32; src.len()];
    for i in 0..h {
        let si = (i + s) % h;
        for j in 0..w {
            let sj = (j + s) % w;
            out[(i * w + j) * c..][..c].copy_from_slice(&src[(si * w + sj) * c..][..c]);
        }
    }
    Tensor::from_f32(vec![h, w, c], out)
}

/// Inverse of [`cyclic_shift`]: roll by `(+s, +s)`.
pub fn cyclic_unshift(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(x)?;
    let src = x.as_f32()?;
    let mut out = vec![0.0f32; src.len()];
    for i in 0..h {
        let di = (i + s) % h;
        for j in 0..w {
            let dj = (j + s) % w;
            out[(di * w + dj) * c..][..c].copy_from_slice(&src[(i * w + j) * c..][..c]);
        }
    }
    Tensor::from_f32(vec![h, w, c], out)
}

fn check_tiling(h: usize, w: usize, win: usize) -> Result<()> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::dim(format!("{h}x{w} grid not divisible by window {win}")));
    }
    Ok(())
}

pub fn window_partition(x: &Tensor, win: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(x)?;
    check_tiling(h, w, win)?;
    let order = window_token_order(h, w, win, 0)?;
    let src = x.as_f32()?;
    let data = gather_rows(src, c, &order);
    Tensor::from_f32(vec![order.len() / (win * win), win * win, c], data)
}

pub fn window_reverse(windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (nw, n, c) = match *windows.shape() {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::dim(format!("expected [nW, N, C], got {:?}", windows.shape()))),
    };
    let win = (n as f64).sqrt().round() as usize;
    if win * win != n {
        return Err(Error::dim(format!("{n} tokens per window is not a square")));
    }
    check_tiling(h, w, win)?;
    if nw * n != h * w {
        return Err(Error::dim(format!("{nw} windows of {n} do not tile {h}x{w}")));
    }
    let order = window_token_order(h, w, win, 0)?;
    let mut out = vec![0.0f32; h * w * c];
    scatter_rows(&mut out, windows.as_f32()?, c, &order);
    Tensor::from_f32(vec![h, w, c], out)
}

/// For each position of the shifted, window-partitioned layout, the row-major
/// token index it reads from. Gathering with this map performs shift then
/// partition; scattering back performs reverse then unshift.
pub fn window_token_order(h: usize, w: usize, win: usize, shift: usize) -> Result<Vec<usize>> {
    check_tiling(h, w, win)?;
    let mut order = Vec::with_capacity(h * w);
    for wi in 0..h / win {
        for wj in 0..w / win {
            for a in 0..win {
                for b in 0..win {
                    let r = (wi * win + a + shift) % h;
                    let c = (wj * win + b + shift) % w;
                    order.push(r * w + c);
                }
            }
        }
    }
    Ok(order)
}

pub(crate) fn gather_rows(src: &[f32], c: usize, order: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(order.len() * c);
    for &t in order {
        out.extend_from_slice(&src[t * c..][..c]);
    }
    out
}

pub(crate) fn scatter_rows(dst: &mut [f32], src: &[f32], c: usize, order: &[usize]) {
    for (p, &t) in order.iter().enumerate() {
        dst[t * c..][..c].copy_from_slice(&src[p * c..][..c]);
    }
}

pub(crate) fn scatter_add_rows(dst: &mut [f32], src: &[f32], c: usize, order: &[usize]) {
    for (p, &t) in order.iter().enumerate() {
        for (d, s) in dst[t * c..][..c].iter_mut().zip(&src[p * c..][..c]) {
            *d += s;
        }
    }
}

/// Per-window additive bias `[num_windows, n, n]` with `n = win * win`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub num_windows: usize,
    pub tokens: usize,
    pub data: Vec<f32>,
}

impl AttentionMask {
    pub fn window(&self, w: usize) -> &[f32] {
        &self.data[w * self.tokens * self.tokens..][..self.tokens * self.tokens]
    }

    pub fn get(&self, w: usize, i: usize, j: usize) -> f32 {
        self.data[(w * self.tokens + i) * self.tokens + j]
    }

    pub fn blocked_count(&self, w: usize) -> usize {
        self.window(w).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f32(vec![self.num_windows, self.tokens, self.tokens], self.data.clone())
    }
}

// Region label of a coordinate in the shifted frame.
fn region(pos: usize, extent: usize, win: usize, shift: usize) -> usize {
    if pos < extent - win {
        0
    } else if pos < extent - shift {
        1
    } else {
        2
    }
}

pub fn build_shift_mask(h: usize, w: usize, win: usize, shift: usize) -> Result<AttentionMask> {
    check_tiling(h, w, win)?;
    if shift >= win {
        return Err(Error::InvalidArgument(format!("shift {shift} must be below window {win}")));
    }
    let n = win * win;
    let (nh, nw) = (h / win, w / win);
    let mut data = vec![0.0f32; nh * nw * n * n];
    if shift > 0 {
        let mut labels = vec![0usize; n];
        for wi in 0..nh {
            for wj in 0..nw {
                for a in 0..win {
                    for b in 0..win {
                        let ra = region(wi * win + a, h, win, shift);
                        let rb = region(wj * win + b, w, win, shift);
                        labels[a * win + b] = ra * 3 + rb;
                    }
                }
                let m = &mut data[(wi * nw + wj) * n * n..][..n * n];
                for i in 0..n {
                    for j in 0..n {
                        if labels[i] != labels[j] {
                            m[i * n + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
    }
    Ok(AttentionMask {
        num_windows: nh * nw,
        tokens: n,
        data,
    })
}
