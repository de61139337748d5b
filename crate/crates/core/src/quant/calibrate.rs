//! Activation statistics and the range-selection rules built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::params::{fake_quantize, QuantParams, Scheme};

pub const HISTOGRAM_BINS: usize = 2048;
pub const DEFAULT_EMA_ALPHA: f32 = 0.9;
pub const DEFAULT_PERCENTILE: f32 = 99.99;
pub const OMSE_GRID_POINTS: usize = 120;
pub const OMSE_GRID_MIN: f64 = 0.10;
pub const OMSE_GRID_MAX: f64 = 1.20;

/// Fixed-bin histogram over `[lo, hi]`. When an observation widens the
/// range, existing bins are re-assigned by their centers, so percentile
/// queries are accurate to about one bin width.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    lo: f32,
    hi: f32,
    counts: Vec<u64>,
}

impl Histogram {
    fn new(lo: f32, hi: f32) -> Self {
        Histogram {
            lo,
            hi,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn range(&self) -> (f32, f32) {
        (self.lo, self.hi)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi as f64 - self.lo as f64) / HISTOGRAM_BINS as f64
    }

    fn bin_of(&self, v: f64) -> usize {
        let width = self.hi as f64 - self.lo as f64;
        if width <= 0.0 {
            return 0;
        }
        let b = ((v - self.lo as f64) / width * HISTOGRAM_BINS as f64).floor();
        (b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    fn edge(&self, i: usize) -> f64 {
        self.lo as f64 + i as f64 * self.bin_width()
    }

    fn widen(&mut self, lo: f32, hi: f32) {
        if lo >= self.lo && hi <= self.hi {
            return;
        }
        let mut wider = Histogram::new(lo.min(self.lo), hi.max(self.hi));
        for (i, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                let center = self.edge(i) + 0.5 * self.bin_width();
                let bin = wider.bin_of(center);
                wider.counts[bin] += c;
            }
        }
        *self = wider;
    }

    fn add(&mut self, values: &[f32]) {
        for &v in values {
            let b = self.bin_of(v as f64);
            self.counts[b] += 1;
        }
    }

    fn merge(&mut self, other: &Histogram) {
        self.widen(other.lo, other.hi);
        let width = other.bin_width();
        for (i, &c) in other.counts.iter().enumerate() {
            if c > 0 {
                let center = other.lo as f64 + (i as f64 + 0.5) * width;
                let b = self.bin_of(center);
                self.counts[b] += c;
            }
        }
    }
}

/// Running statistics for one activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub site: String,
    pub min: f32,
    pub max: f32,
    pub ema_min: f32,
    pub ema_max: f32,
    pub alpha: f32,
    pub count: u64,
    pub batches: u64,
    histogram: Option<Histogram>,
}

impl CalibrationStats {
    pub fn new(site: impl Into<String>) -> Self {
        Self::with_alpha(site, DEFAULT_EMA_ALPHA)
    }

    pub fn with_alpha(site: impl Into<String>, alpha: f32) -> Self {
        CalibrationStats {
            site: site.into(),
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            ema_min: 0.0,
            ema_max: 0.0,
            alpha,
            count: 0,
            batches: 0,
            histogram: None,
        }
    }

    pub fn histogram(&self) -> Option<&Histogram> {
        self.histogram.as_ref()
    }

    /// Fold one batch into the statistics.
    pub fn observe(&mut self, batch: &[f32]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let mut bmin = f32::INFINITY;
        let mut bmax = f32::NEG_INFINITY;
        for &v in batch {
            if !v.is_finite() {
                return Err(Error::Calibration(format!(
                    "non-finite activation {v} at site {}",
                    self.site
                )));
            }
            bmin = bmin.min(v);
            bmax = bmax.max(v);
        }
        self.min = self.min.min(bmin);
        self.max = self.max.max(bmax);
        if self.batches == 0 {
            self.ema_min = bmin;
            self.ema_max = bmax;
        } else {
            // r + (1 - a)(b - r): a constant stream stays exactly constant.
            let a = self.alpha as f64;
            self.ema_min = (self.ema_min as f64 + (1.0 - a) * (bmin as f64 - self.ema_min as f64)) as f32;
            self.ema_max = (self.ema_max as f64 + (1.0 - a) * (bmax as f64 - self.ema_max as f64)) as f32;
        }
        let hist = self
            .histogram
            .get_or_insert_with(|| Histogram::new(bmin, bmax));
        hist.widen(bmin, bmax);
        hist.add(batch);
        self.count += batch.len() as u64;
        self.batches += 1;
        Ok(())
    }

    /// Combine statistics gathered independently on another shard.
    /// The EMA of `self` is kept unless `self` has seen nothing.
    pub fn merge(&mut self, other: &CalibrationStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            let site = std::mem::take(&mut self.site);
            *self = other.clone();
            self.site = site;
            return;
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        if let (Some(h), Some(o)) = (self.histogram.as_mut(), other.histogram.as_ref()) {
            h.merge(o);
        }
        self.count += other.count;
        self.batches += other.batches;
    }

    fn require_samples(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Calibration(format!(
                "site {} has no observations",
                self.site
            )));
        }
        Ok(())
    }

    /// Values below/above which `(100 - p)%` and `p%` of samples fall,
    /// read from the histogram. `p = 100` returns the exact min/max.
    pub fn percentile_range(&self, p: f32) -> Result<(f32, f32)> {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "percentile must be in (0, 100], got {p}"
            )));
        }
        self.require_samples()?;
        if p == 100.0 {
            return Ok((self.min, self.max));
        }
        let hist = self.histogram.as_ref().expect("histogram exists once observed");
        let n = hist.total() as f64;
        // f32 percentiles such as 99.9 widen to 99.90000152; snap to 1e-4.
        let p = (p as f64 * 1e4).round() / 1e4;
        let upper_rank = ((p / 100.0) * n - 1e-9).ceil().max(1.0) as u64;
        let lower_rank = (((100.0 - p) / 100.0) * n + 1e-9).floor() as u64;
        let mut cum = 0u64;
        let mut lower = None;
        let mut upper = None;
        for (i, &c) in hist.counts.iter().enumerate() {
            cum += c;
            if lower.is_none() && cum > lower_rank {
                lower = Some(hist.edge(i));
            }
            if cum >= upper_rank {
                upper = Some(hist.edge(i + 1));
                break;
            }
        }
        let lower = (lower.unwrap_or(self.min as f64) as f32).max(self.min);
        let upper = (upper.unwrap_or(self.max as f64) as f32).min(self.max);
        Ok((lower, upper.max(lower)))
    }
}

/// Uniform parameters covering `[lo, hi]`. The range is widened to include
/// zero so that zero is exactly representable; an empty range falls back
/// to scale 1 / zero point 0 and reports `true` in the second slot.
pub fn params_for_range(lo: f32, hi: f32, bits: u8, scheme: Scheme) -> Result<(QuantParams, bool)> {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    match scheme {
        Scheme::Affine => {
            let levels = ((1u32 << bits) - 1) as f32;
            let scale = (hi - lo) / levels;
            if !(scale > 0.0 && scale.is_finite()) {
                return Ok((QuantParams::degenerate(scheme, bits), true));
            }
            let zp = (-lo / scale).round_ties_even().clamp(0.0, levels) as i32;
            Ok((QuantParams::affine(bits, scale, zp)?, false))
        }
        Scheme::Symmetric => {
            let qmax = ((1u32 << (bits - 1)) - 1) as f32;
            let scale = lo.abs().max(hi.abs()) / qmax;
            if !(scale > 0.0 && scale.is_finite()) {
                return Ok((QuantParams::degenerate(scheme, bits), true));
            }
            Ok((QuantParams::symmetric(bits, scale)?, false))
        }
        other => Err(Error::InvalidArgument(format!(
            "range calibration does not apply to {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub params: QuantParams,
    /// Set when the observed range was empty and the fallback was used.
    pub degenerate: bool,
}

pub fn calibrate_minmax(stats: &CalibrationStats, bits: u8, scheme: Scheme) -> Result<Calibrated> {
    stats.require_samples()?;
    let (params, degenerate) = params_for_range(stats.min, stats.max, bits, scheme)?;
    Ok(Calibrated { params, degenerate })
}

pub fn calibrate_ema(stats: &CalibrationStats, bits: u8, scheme: Scheme) -> Result<Calibrated> {
    stats.require_samples()?;
    let (params, degenerate) = params_for_range(stats.ema_min, stats.ema_max, bits, scheme)?;
    Ok(Calibrated { params, degenerate })
}

pub fn calibrate_percentile(
    stats: &CalibrationStats,
    bits: u8,
    scheme: Scheme,
    p: f32,
) -> Result<Calibrated> {
    let (lo, hi) = stats.percentile_range(p)?;
    let (params, degenerate) = params_for_range(lo, hi, bits, scheme)?;
    Ok(Calibrated { params, degenerate })
}

/// Mean squared quantize-dequantize error of `sample` under `qp`.
pub fn quant_mse(sample: &[f32], qp: &QuantParams) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let fq = fake_quantize(sample, qp);
    sample
        .iter()
        .zip(&fq)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / sample.len() as f64
}

/// Scale multipliers scanned by OMSE: an even grid over `[0.10, 1.20]` with
/// the point nearest 1.0 replaced by exactly 1.0.
pub fn omse_grid() -> Vec<f64> {
    let step = (OMSE_GRID_MAX - OMSE_GRID_MIN) / (OMSE_GRID_POINTS - 1) as f64;
    let mut grid: Vec<f64> = (0..OMSE_GRID_POINTS)
        .map(|i| OMSE_GRID_MIN + i as f64 * step)
        .collect();
    let nearest = ((1.0 - OMSE_GRID_MIN) / step).round() as usize;
    grid[nearest] = 1.0;
    grid
}

/// Pick the scale on the OMSE grid minimizing reconstruction MSE on
/// `sample`. The zero point of the MinMax solution is kept fixed.
pub fn calibrate_omse(
    stats: &CalibrationStats,
    sample: &[f32],
    bits: u8,
    scheme: Scheme,
) -> Result<Calibrated> {
    if sample.is_empty() {
        return Err(Error::Calibration(format!(
            "site {} has an empty calibration sample",
            stats.site
        )));
    }
    let base = calibrate_minmax(stats, bits, scheme)?;
    if base.degenerate {
        return Ok(base);
    }
    let mut best = base.params;
    let mut best_mse = f64::INFINITY;
    for f in omse_grid() {
        let scale = (base.params.scale as f64 * f) as f32;
        if !(scale > 0.0) {
            continue;
        }
        let cand = QuantParams {
            scale,
            ..base.params
        };
        let mse = quant_mse(sample, &cand);
        if mse < best_mse {
            best_mse = mse;
            best = cand;
        }
    }
    Ok(Calibrated {
        params: best,
        degenerate: false,
    })
}

/// Bounded, deterministic subsample of the values seen at a site: once full,
/// every other retained value is dropped and the keep-stride doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample {
    capacity: usize,
    stride: u64,
    seen: u64,
    values: Vec<f32>,
}

impl ValueSample {
    pub fn new(capacity: usize) -> Self {
        ValueSample {
            capacity: capacity.max(2),
            stride: 1,
            seen: 0,
            values: Vec::new(),
        }
    }

    pub fn extend(&mut self, batch: &[f32]) {
        for &v in batch {
            if self.seen % self.stride == 0 {
                if self.values.len() == self.capacity {
                    let kept: Vec<f32> = self.values.iter().step_by(2).copied().collect();
                    self.values = kept;
                    self.stride *= 2;
                    if self.seen % self.stride != 0 {
                        self.seen += 1;
                        continue;
                    }
                }
                self.values.push(v);
            }
            self.seen += 1;
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-channel absolute maxima of a `[tokens, channels]` activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanges {
    pub abs_max: Vec<f32>,
}

impl ChannelRanges {
    pub fn new(channels: usize) -> Self {
        ChannelRanges {
            abs_max: vec![0.0; channels],
        }
    }

    pub fn observe(&mut self, x: &[f32]) -> Result<()> {
        let c = self.abs_max.len();
        for (i, &v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Calibration(format!("non-finite activation {v}")));
            }
            let slot = &mut self.abs_max[i % c];
            *slot = slot.max(v.abs());
        }
        Ok(())
    }
}
