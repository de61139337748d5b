//! f32 kernels. Slice-level functions take explicit extents and are what the
//! model uses internally; the [`Tensor`] wrappers validate shapes.
//!
//! Accumulation is f32 throughout and the summation order of every kernel
//! is fixed, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LANES: usize = 8;

/// Dot product with eight independent partial sums combined pairwise.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `[m, k] x [k, n] -> [m, n]`, accumulating rows of `b` in k order.
pub fn matmul_slices(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            axpy(row, a[i * k + t], &b[t * n..(t + 1) * n]);
        }
    }
    out
}

/// `[m, k] x [n, k]^T -> [m, n]`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// Fully connected layer with PyTorch weight layout `[out, in]`:
/// `y = x W^T + b` for `x` of shape `[rows, in]`.
pub fn linear(x: &[f32], rows: usize, weight: &[f32], out: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let inp = weight.len() / out;
    debug_assert_eq!(x.len(), rows * inp);
    let mut y = matmul_nt(x, weight, rows, inp, out);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    y
}

pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// In-place softmax over each contiguous row of length `n`, with max subtraction.
pub fn softmax_rows(x: &mut [f32], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Per-row statistics produced by [`layernorm_rows_with_stats`].
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// LayerNorm over rows of length `c` with population variance.
pub fn layernorm_rows(x: &[f32], c: usize, gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f32> {
    layernorm_rows_with_stats(x, c, gamma, beta, eps).0
}

pub fn layernorm_rows_with_stats(
    x: &[f32],
    c: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, NormStats) {
    let rows = x.len() / c;
    let mut out = vec![0.0f32; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    let inv_c = 1.0 / c as f32;
    for (xr, yr) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = xr.iter().sum::<f32>() * inv_c;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() * inv_c;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

/// Exact GELU `x * Phi(x)` using erf.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let xd = x as f64;
    (0.5 * xd * (1.0 + libm::erf(xd * std::f64::consts::FRAC_1_SQRT_2))) as f32
}

/// Derivative of [`gelu_scalar`]: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad_scalar(x: f32) -> f32 {
    let xd = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(xd * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * xd * xd).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf + xd * pdf) as f32
}

pub fn gelu_inplace(x: &mut [f32]) {
    for v in x {
        *v = gelu_scalar(*v);
    }
}

fn require_f32<'a>(t: &'a Tensor, what: &str) -> Result<&'a [f32]> {
    t.as_f32()
        .map_err(|_| Error::InvalidArgument(format!("{what} must be f32, got {:?}", t.dtype())))
}

/// Matrix product of `[m, k]` and `[k, n]` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = matmul_slices(require_f32(a, "lhs")?, require_f32(b, "rhs")?, m, k, n);
    Tensor::from_f32(vec![m, n], out)
}

/// Softmax along the last axis. NaN inputs propagate to NaN outputs.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax of a scalar"))?;
    let mut data = require_f32(x, "softmax input")?.to_vec();
    softmax_rows(&mut data, n);
    Tensor::from_f32(x.shape().to_vec(), data)
}

pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layernorm of a scalar"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "layernorm affine shapes {:?}/{:?} do not match channels {c}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let out = layernorm_rows(
        require_f32(x, "layernorm input")?,
        c,
        require_f32(gamma, "gamma")?,
        require_f32(beta, "beta")?,
        eps,
    );
    Tensor::from_f32(x.shape().to_vec(), out)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let mut data = require_f32(x, "gelu input")?.to_vec();
    gelu_inplace(&mut data);
    Tensor::from_f32(x.shape().to_vec(), data)
}
