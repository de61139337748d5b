//! Int8 runtime: per-channel symmetric weights, per-site activation
//! quantization, integer GEMMs with i32 accumulation.
//!
//! Every GEMM works on centred levels (`q - zero_point`) and its i32 result
//! is dequantized by one f32 multiply with `s_in * s_w` before the f32 bias.
//! Softmax, LayerNorm, GELU and residual adds stay in f32; under `fqvit`
//! LayerNorm inputs pass through power-of-two-factor quantization and the
//! attention probabilities through the 4-bit log2 quantizer.
//!
//! [`Kernel::FakeQuant`] evaluates the same GEMMs by widening the levels to
//! f64 and accumulating in floating point. All partial sums are integers
//! below 2^31, so both kernels return the same accumulators and the
//! surrounding code (shared) rounds identically at every site.

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{extract_patches, merge_gather};
use crate::model::window::{build_shift_mask, gather_rows, scatter_add_rows, window_token_order};
use crate::model::{block_prefix, param_specs, ModelConfig, ParamKind, ParameterSet};
use crate::quant::params::{log2_level, quantize_level, PTF_MAX_EXPONENT};
use crate::quant::{CalibrationMethod, CalibrationTable, PtfParams, QuantParams, Scheme, SiteQuant};
use crate::tensor::ops::{gelu_inplace, layernorm_rows, softmax_rows, LAYERNORM_EPS};
use crate::tensor::{Tensor, TensorArchive, TensorData};

use super::calibration::{quant_sites, SiteKind};

/// Longest reduction accepted by the uniform GEMMs: `255 * 255 * depth`
/// must stay below `2^31`.
pub const MAX_GEMM_DEPTH: usize = 32_768;

/// Longest reduction of the log2 probability GEMM (`255 << 15` per term).
const MAX_LOG2_DEPTH: usize = 256;

const SAMPLES_ENTRY: &str = "calibration.samples";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// i32 accumulation over 8-bit levels.
    #[default]
    Integer,
    /// Reference path: levels widened to f64 and accumulated in floating point.
    FakeQuant,
}

trait Level: Copy {
    fn int(self) -> i32;
}

impl Level for i8 {
    #[inline(always)]
    fn int(self) -> i32 {
        self as i32
    }
}

impl Level for i16 {
    #[inline(always)]
    fn int(self) -> i32 {
        self as i32
    }
}

#[inline]
fn dot_i32<B: Level>(a: &[i16], b: &[B]) -> i32 {
    let mut acc = [0i32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let mut tail = 0i32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as i32 * y.int();
    }
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] as i32 * y[l].int();
        }
    }
    acc.iter().sum::<i32>() + tail
}

impl Kernel {
    /// `out[i, j] = sum_t a[i, t] * b[j, t]` for `a: [m, k]`, `b: [n, k]`.
    fn gemm_nt<B: Level>(self, a: &[i16], b: &[B], m: usize, k: usize, n: usize) -> Vec<i32> {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        let mut out = Vec::with_capacity(m * n);
        for ar in a.chunks_exact(k) {
            for br in b.chunks_exact(k) {
                out.push(match self {
                    Kernel::Integer => dot_i32(ar, br),
                    Kernel::FakeQuant => {
                        let s: f64 = ar.iter().zip(br).map(|(&x, y)| x as f64 * y.int() as f64).sum();
                        s as i32
                    }
                });
            }
        }
        out
    }

    /// Probabilities as log2 levels `p` (value `2^-p`) against centred
    /// levels `v: [n, k]`. Result is in units of `2^-(2^bits - 1)`.
    fn log2_gemm_nt(self, p: &[u8], v: &[i16], m: usize, k: usize, n: usize, bits: u8) -> Vec<i32> {
        let top = (1u32 << bits) - 1;
        let mut out = Vec::with_capacity(m * n);
        for pr in p.chunks_exact(k) {
            for vr in v.chunks_exact(k) {
                out.push(match self {
                    Kernel::Integer => pr
                        .iter()
                        .zip(vr)
                        .map(|(&q, &x)| (x as i32) << (top - q as u32))
                        .sum(),
                    Kernel::FakeQuant => {
                        let s: f64 = pr
                            .iter()
                            .zip(vr)
                            .map(|(&q, &x)| x as f64 * (-(q as f64)).exp2())
                            .sum();
                        (s * (top as f64).exp2()) as i32
                    }
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum ActQuant {
    Uniform(QuantParams),
    Log2(u8),
    Ptf(PtfParams),
}

impl ActQuant {
    fn from_site(s: &SiteQuant) -> Result<Self> {
        Ok(match s.scheme {
            Scheme::Affine | Scheme::Symmetric => ActQuant::Uniform(s.quant_params()),
            Scheme::Log2 => ActQuant::Log2(s.bits),
            Scheme::PotChannel => ActQuant::Ptf(
                s.ptf_params()
                    .ok_or_else(|| Error::Config("pot_channel site without exponents".into()))?,
            ),
        })
    }
}

fn levels(x: &[f32], qp: &QuantParams) -> Vec<i16> {
    let (lo, hi) = (qp.qmin(), qp.qmax());
    x.iter()
        .map(|&v| (quantize_level(v, qp.scale, qp.zero_point, lo, hi) - qp.zero_point) as i16)
        .collect()
}

struct QLinear {
    inp: usize,
    out: usize,
    weight: Vec<i8>,
    scales: Vec<f32>,
    bias: Option<Vec<f32>>,
}

/// Per-output-channel symmetric 8-bit levels and scales of a `[out, in]` matrix.
fn quantize_weight(w: &[f32], out: usize) -> (Vec<i8>, Vec<f32>) {
    let inp = w.len() / out;
    let mut levels = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(out);
    for row in w.chunks_exact(inp) {
        let amax = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if amax > 0.0 { amax / 127.0 } else { 1.0 };
        levels.extend(row.iter().map(|&v| quantize_level(v, scale, 0, -127, 127) as i8));
        scales.push(scale);
    }
    (levels, scales)
}

fn module_of(weight_name: &str) -> &str {
    weight_name.strip_suffix(".weight").unwrap_or(weight_name)
}

/// Placeholder i8/u8 tensors need qparams; weight levels carry unit scale
/// and the real per-channel scales live in `{module}.weight_scale`.
fn level_qparams() -> QuantParams {
    QuantParams::degenerate(Scheme::Symmetric, 8)
}

/// Build the int8 archive from full-precision parameters and a calibration table.
pub(crate) fn commit(params: &ParameterSet, cfg: &ModelConfig, table: &CalibrationTable) -> Result<TensorArchive> {
    let mut archive = TensorArchive::new();
    for spec in param_specs(cfg) {
        let t = params.tensor(&spec.name)?;
        if spec.kind == ParamKind::Weight {
            let out = spec.shape[0];
            let (levels, scales) = quantize_weight(t.as_f32()?, out);
            archive.push(
                spec.name.clone(),
                Tensor::new(spec.shape.clone(), TensorData::I8(levels), Some(level_qparams()))?,
            )?;
            archive.push(
                format!("{}.weight_scale", module_of(&spec.name)),
                Tensor::from_f32(vec![out], scales)?,
            )?;
        } else {
            archive.push(spec.name, t.clone())?;
        }
    }
    for (site, q) in &table.sites {
        let marker = Tensor::new(vec![1], TensorData::U8(vec![0]), Some(q.quant_params()))?;
        archive.push(format!("act.{site}"), marker)?;
        if let Some(e) = &q.exponents {
            let e: Vec<i32> = e.iter().map(|&v| v as i32).collect();
            archive.push(format!("act.{site}.exponents"), Tensor::new(vec![e.len()], TensorData::I32(e), None)?)?;
        }
    }
    archive.push(
        SAMPLES_ENTRY,
        Tensor::new(vec![1], TensorData::I32(vec![table.sample_count as i32]), None)?,
    )?;
    Ok(archive)
}

pub(crate) struct Int8Model {
    cfg: ModelConfig,
    linears: HashMap<String, QLinear>,
    floats: HashMap<String, Vec<f32>>,
    sites: HashMap<String, ActQuant>,
}

fn entry<'a>(archive: &'a TensorArchive, name: &str) -> Result<&'a Tensor> {
    archive
        .get(name)
        .ok_or_else(|| Error::Config(format!("engine archive is missing {name}")))
}

impl Int8Model {
    pub(crate) fn decode(
        cfg: &ModelConfig,
        method: CalibrationMethod,
        archive: &TensorArchive,
    ) -> Result<(Self, CalibrationTable)> {
        let mut expected = 1;
        let mut linears = HashMap::new();
        let mut floats = HashMap::new();
        for spec in param_specs(cfg) {
            let t = entry(archive, &spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            expected += 1;
            if spec.kind == ParamKind::Weight {
                let module = module_of(&spec.name).to_string();
                let weight = match t.data() {
                    TensorData::I8(v) => v.clone(),
                    other => {
                        return Err(Error::Config(format!("{} stored as {:?}, expected i8", spec.name, other.dtype())))
                    }
                };
                let scales = entry(archive, &format!("{module}.weight_scale"))?.as_f32()?.to_vec();
                expected += 1;
                let (out, inp) = (spec.shape[0], spec.shape[1]);
                if scales.len() != out || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::Config(format!("{module}: bad weight scales")));
                }
                if inp > MAX_GEMM_DEPTH {
                    return Err(Error::Config(format!("{module}: reduction depth {inp} too large for i32")));
                }
                linears.insert(
                    module,
                    QLinear {
                        inp,
                        out,
                        weight,
                        scales,
                        bias: None,
                    },
                );
            } else {
                floats.insert(spec.name.clone(), t.as_f32()?.to_vec());
            }
        }
        for (module, lin) in linears.iter_mut() {
            lin.bias = floats.get(&format!("{module}.bias")).cloned();
        }

        let mut table = CalibrationTable {
            method,
            sample_count: 0,
            warnings: Vec::new(),
            sites: Default::default(),
        };
        let mut sites = HashMap::new();
        for (site, channels, kind) in quant_sites(cfg, method) {
            let marker = entry(archive, &format!("act.{site}"))?;
            let qp = *marker
                .qparams()
                .ok_or_else(|| Error::Config(format!("act.{site} carries no qparams")))?;
            qp.validate()?;
            let fits = match kind {
                SiteKind::Uniform => matches!(qp.scheme, Scheme::Affine | Scheme::Symmetric),
                SiteKind::Attention => qp.scheme != Scheme::PotChannel,
                SiteKind::Norm => qp.scheme == Scheme::PotChannel,
            };
            if !fits {
                return Err(Error::Config(format!("act.{site}: scheme {:?} not allowed here", qp.scheme)));
            }
            expected += 1;
            let sq = if qp.scheme == Scheme::PotChannel {
                let e = entry(archive, &format!("act.{site}.exponents"))?;
                expected += 1;
                let exps = match e.data() {
                    TensorData::I32(v) if v.len() == channels => v
                        .iter()
                        .map(|&x| u8::try_from(x).ok().filter(|x| *x <= PTF_MAX_EXPONENT))
                        .collect::<Option<Vec<u8>>>(),
                    _ => None,
                }
                .ok_or_else(|| Error::Config(format!("act.{site}.exponents malformed")))?;
                SiteQuant {
                    exponents: Some(exps),
                    ..SiteQuant::uniform(qp)
                }
            } else {
                SiteQuant::uniform(qp)
            };
            if qp.scheme == Scheme::Log2 && channels > MAX_LOG2_DEPTH {
                return Err(Error::Config(format!("{site}: window of {channels} tokens too large for log2 GEMM")));
            }
            if method != CalibrationMethod::DefaultRange
                && qp.scheme == Scheme::Affine
                && qp.scale == 1.0
                && qp.zero_point == 0
            {
                table
                    .warnings
                    .push(format!("{site}: no dynamic range observed, using scale 1"));
            }
            sites.insert(site.clone(), ActQuant::from_site(&sq)?);
            table.sites.insert(site, sq);
        }
        table.sample_count = match entry(archive, SAMPLES_ENTRY)?.data() {
            TensorData::I32(v) if v.len() == 1 && v[0] >= 0 => v[0] as usize,
            _ => return Err(Error::Config(format!("{SAMPLES_ENTRY} malformed"))),
        };
        if archive.len() != expected {
            return Err(Error::Config(format!(
                "engine archive has {} tensors, {} expected for {method}",
                archive.len(),
                expected
            )));
        }
        let model = Int8Model {
            cfg: cfg.clone(),
            linears,
            floats,
            sites,
        };
        Ok((model, table))
    }

    fn float(&self, name: &str) -> Result<&[f32]> {
        self.floats
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn site(&self, name: &str) -> Result<&ActQuant> {
        self.sites
            .get(name)
            .ok_or_else(|| Error::Config(format!("no quantization parameters for {name}")))
    }

    fn uniform(&self, name: &str) -> Result<&QuantParams> {
        match self.site(name)? {
            ActQuant::Uniform(qp) => Ok(qp),
            other => Err(Error::Config(format!("{name} is {other:?}, expected a uniform quantizer"))),
        }
    }

    fn linear(&self, kernel: Kernel, module: &str, site: &str, x: &[f32]) -> Result<Vec<f32>> {
        let lin = self
            .linears
            .get(module)
            .ok_or_else(|| Error::Config(format!("missing linear {module}")))?;
        let qp = self.uniform(site)?;
        if x.len() % lin.inp != 0 {
            return Err(Error::dim(format!("{module}: {} values for {} inputs", x.len(), lin.inp)));
        }
        let rows = x.len() / lin.inp;
        let acc = kernel.gemm_nt(&levels(x, qp), &lin.weight, rows, lin.inp, lin.out);
        let mult: Vec<f32> = lin.scales.iter().map(|s| qp.scale * s).collect();
        let mut y = Vec::with_capacity(acc.len());
        for row in acc.chunks_exact(lin.out) {
            for (o, &a) in row.iter().enumerate() {
                y.push(a as f32 * mult[o] + lin.bias.as_ref().map_or(0.0, |b| b[o]));
            }
        }
        Ok(y)
    }

    /// LayerNorm input after its site quantizer, when it has one.
    fn norm_input<'a>(&self, site: &str, x: &'a [f32]) -> Result<Cow<'a, [f32]>> {
        Ok(match self.sites.get(site) {
            Some(ActQuant::Ptf(p)) => {
                if x.len() % p.exponents.len() != 0 {
                    return Err(Error::dim(format!("{site}: rows do not match {} channels", p.exponents.len())));
                }
                Cow::Owned(p.dequantize(&p.quantize(x)))
            }
            Some(other) => return Err(Error::Config(format!("{site} is {other:?}, expected pot_channel"))),
            None => Cow::Borrowed(x),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        kernel: Kernel,
        input: &[f32],
        nw: usize,
        n: usize,
        c: usize,
        heads: usize,
        p: &str,
        mask: Option<&crate::model::AttentionMask>,
    ) -> Result<Vec<f32>> {
        let rows = nw * n;
        let d = c / heads;
        let qkv = self.linear(kernel, &format!("{p}.qkv"), &format!("{p}.qkv.in"), input)?;
        let (qp, kp, vp) = (
            self.uniform(&format!("{p}.q"))?,
            self.uniform(&format!("{p}.k"))?,
            self.uniform(&format!("{p}.v"))?,
        );
        let mut q = Vec::with_capacity(rows * c);
        let mut k = Vec::with_capacity(rows * c);
        let mut v = Vec::with_capacity(rows * c);
        for r in qkv.chunks_exact(3 * c) {
            q.extend_from_slice(&r[..c]);
            k.extend_from_slice(&r[c..2 * c]);
            v.extend_from_slice(&r[2 * c..]);
        }
        let (ql, kl, vl) = (levels(&q, qp), levels(&k, kp), levels(&v, vp));
        let head = |l: &[i16], win: usize, h: usize| -> Vec<i16> {
            (0..n)
                .flat_map(|i| l[(win * n + i) * c + h * d..][..d].iter().copied())
                .collect()
        };
        let score_mult = qp.scale * kp.scale;
        let scale = 1.0 / (d as f32).sqrt();
        let attn = self.site(&format!("{p}.attn"))?;
        let mut ctx = vec![0.0f32; rows * c];
        for win in 0..nw {
            for h in 0..heads {
                let acc = kernel.gemm_nt(&head(&ql, win, h), &head(&kl, win, h), n, d, n);
                let mut probs: Vec<f32> = acc.iter().map(|&a| a as f32 * score_mult * scale).collect();
                if let Some(m) = mask {
                    for (s, b) in probs.iter_mut().zip(m.window(win)) {
                        *s += b;
                    }
                }
                softmax_rows(&mut probs, n);
                // v^T for this head: [d, n]
                let vh = head(&vl, win, h);
                let vt: Vec<i16> = (0..d).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| vh[i * d + j]).collect();
                let (acc, mult) = match attn {
                    ActQuant::Uniform(pq) => (kernel.gemm_nt(&levels(&probs, pq), &vt, n, n, d), pq.scale * vp.scale),
                    ActQuant::Log2(bits) => {
                        let pl = probs.iter().map(|&x| log2_level(x, *bits)).collect::<Result<Vec<u8>>>()?;
                        let unit = (-(((1u32 << bits) - 1) as f32)).exp2();
                        (kernel.log2_gemm_nt(&pl, &vt, n, n, d, *bits), vp.scale * unit)
                    }
                    ActQuant::Ptf(_) => return Err(Error::Config(format!("{p}.attn cannot use pot_channel"))),
                };
                for i in 0..n {
                    let out = &mut ctx[(win * n + i) * c + h * d..][..d];
                    for (o, &a) in out.iter_mut().zip(&acc[i * d..(i + 1) * d]) {
                        *o = a as f32 * mult;
                    }
                }
            }
        }
        self.linear(kernel, &format!("{p}.proj"), &format!("{p}.proj.in"), &ctx)
    }

    fn block(&self, kernel: Kernel, x: &mut [f32], grid: usize, stage: usize, block: usize) -> Result<()> {
        let cfg = &self.cfg;
        let c = cfg.stage_dim(stage);
        let win = cfg.window_size;
        let shift = cfg.block_shift(block);
        let p = block_prefix(stage, block);

        let xin = self.norm_input(&format!("{p}.ln1.in"), x)?;
        let h = layernorm_rows(
            &xin,
            c,
            self.float(&format!("{p}.ln1.weight"))?,
            self.float(&format!("{p}.ln1.bias"))?,
            LAYERNORM_EPS,
        );
        let order = window_token_order(grid, grid, win, shift)?;
        let mask = if shift > 0 {
            Some(build_shift_mask(grid, grid, win, shift)?)
        } else {
            None
        };
        let hw = gather_rows(&h, c, &order);
        let n = win * win;
        let y = self.attention(kernel, &hw, order.len() / n, n, c, cfg.num_heads[stage], &p, mask.as_ref())?;
        scatter_add_rows(x, &y, c, &order);

        let xin = self.norm_input(&format!("{p}.ln2.in"), x)?;
        let h2 = layernorm_rows(
            &xin,
            c,
            self.float(&format!("{p}.ln2.weight"))?,
            self.float(&format!("{p}.ln2.bias"))?,
            LAYERNORM_EPS,
        );
        let mut m1 = self.linear(kernel, &format!("{p}.mlp1"), &format!("{p}.mlp1.in"), &h2)?;
        gelu_inplace(&mut m1);
        let m2 = self.linear(kernel, &format!("{p}.mlp2"), &format!("{p}.mlp2.in"), &m1)?;
        for (a, b) in x.iter_mut().zip(&m2) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn forward(&self, image: &Tensor, kernel: Kernel) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        let patches = extract_patches(image, cfg)?;
        let mut x = self.linear(kernel, "patch_embed", "patch_embed.in", &patches)?;
        let mut grid = cfg.image_size / cfg.patch_size;
        for stage in 0..cfg.num_stages() {
            for block in 0..cfg.depths[stage] {
                self.block(kernel, &mut x, grid, stage, block)?;
            }
            if stage + 1 < cfg.num_stages() {
                let c = cfg.stage_dim(stage);
                let gathered = merge_gather(&x, grid, c);
                let gin = self.norm_input(&format!("stage{stage}.merge.norm.in"), &gathered)?;
                let normed = layernorm_rows(
                    &gin,
                    4 * c,
                    self.float(&format!("stage{stage}.merge.norm.weight"))?,
                    self.float(&format!("stage{stage}.merge.norm.bias"))?,
                    LAYERNORM_EPS,
                );
                x = self.linear(
                    kernel,
                    &format!("stage{stage}.merge.reduce"),
                    &format!("stage{stage}.merge.reduce.in"),
                    &normed,
                )?;
                grid /= 2;
            }
        }
        let c = cfg.final_dim();
        let mut pooled = vec![0.0f32; c];
        for row in x.chunks_exact(c) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        let inv = 1.0 / (grid * grid) as f32;
        pooled.iter_mut().for_each(|p| *p *= inv);
        let pin = self.norm_input("final_norm.in", &pooled)?;
        let normed = layernorm_rows(
            &pin,
            c,
            self.float("final_norm.gamma")?,
            self.float("final_norm.beta")?,
            LAYERNORM_EPS,
        );
        self.linear(kernel, "head", "head.in", &normed)
    }
}
