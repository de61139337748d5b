//! Quantization parameters and the elementwise quantizers.
//!
//! All rounding is round-half-to-even. Uniform quantizers map
//! `q = clamp(round(x / scale) + zero_point, qmin, qmax)` and reconstruct
//! `(q - zero_point) * scale`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Unsigned levels `[0, 2^bits - 1]` with a zero point.
    Affine,
    /// Signed levels `[-(2^(bits-1) - 1), 2^(bits-1) - 1]`, zero point 0.
    Symmetric,
    /// Levels `q` reconstruct to `2^-q`; used for post-softmax attention.
    Log2,
    /// Symmetric levels with per-channel power-of-two scale factors.
    PotChannel,
}

impl Scheme {
    pub fn id(self) -> u8 {
        match self {
            Scheme::Affine => 0,
            Scheme::Symmetric => 1,
            Scheme::Log2 => 2,
            Scheme::PotChannel => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Scheme::Affine),
            1 => Some(Scheme::Symmetric),
            2 => Some(Scheme::Log2),
            3 => Some(Scheme::PotChannel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: Scheme,
    pub bits: u8,
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn affine(bits: u8, scale: f32, zero_point: i32) -> Result<Self> {
        Self::new(Scheme::Affine, bits, scale, zero_point)
    }

    pub fn symmetric(bits: u8, scale: f32) -> Result<Self> {
        Self::new(Scheme::Symmetric, bits, scale, 0)
    }

    pub fn log2(bits: u8) -> Result<Self> {
        Self::new(Scheme::Log2, bits, 1.0, 0)
    }

    pub fn new(scheme: Scheme, bits: u8, scale: f32, zero_point: i32) -> Result<Self> {
        let qp = QuantParams {
            scheme,
            bits,
            scale,
            zero_point,
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Fallback used when calibration sees no dynamic range.
    pub fn degenerate(scheme: Scheme, bits: u8) -> Self {
        QuantParams {
            scheme,
            bits,
            scale: 1.0,
            zero_point: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits != 4 && self.bits != 8 {
            return Err(Error::InvalidArgument(format!(
                "unsupported bit width {}",
                self.bits
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale must be finite and positive, got {}",
                self.scale
            )));
        }
        match self.scheme {
            Scheme::Symmetric | Scheme::PotChannel if self.zero_point != 0 => Err(
                Error::InvalidArgument("symmetric schemes require zero_point 0".into()),
            ),
            Scheme::Log2 if self.scale != 1.0 || self.zero_point != 0 => Err(
                Error::InvalidArgument("log2 scheme requires scale 1 and zero_point 0".into()),
            ),
            Scheme::Affine if self.zero_point < self.qmin() || self.zero_point > self.qmax() => {
                Err(Error::InvalidArgument(format!(
                    "zero_point {} outside [{}, {}]",
                    self.zero_point,
                    self.qmin(),
                    self.qmax()
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn qmin(&self) -> i32 {
        match self.scheme {
            Scheme::Affine | Scheme::Log2 => 0,
            Scheme::Symmetric | Scheme::PotChannel => -((1 << (self.bits - 1)) - 1),
        }
    }

    pub fn qmax(&self) -> i32 {
        match self.scheme {
            Scheme::Affine | Scheme::Log2 => (1 << self.bits) - 1,
            Scheme::Symmetric | Scheme::PotChannel => (1 << (self.bits - 1)) - 1,
        }
    }

    /// Quantize one value with a uniform scheme.
    #[inline]
    pub fn quantize_value(&self, x: f32) -> i32 {
        quantize_level(x, self.scale, self.zero_point, self.qmin(), self.qmax())
    }

    #[inline]
    pub fn dequantize_value(&self, q: i32) -> f32 {
        (q - self.zero_point) as f32 * self.scale
    }
}

/// `clamp(round_half_even(x / scale) + zero_point, qmin, qmax)`.
#[inline]
pub fn quantize_level(x: f32, scale: f32, zero_point: i32, qmin: i32, qmax: i32) -> i32 {
    let r = (x / scale).round_ties_even();
    // Clamp in float first so huge values cannot overflow the integer cast.
    let r = r.clamp((qmin - zero_point) as f32, (qmax - zero_point) as f32);
    (r as i32 + zero_point).clamp(qmin, qmax)
}

/// Quantize a slice with a uniform (affine or symmetric) scheme.
pub fn quantize(x: &[f32], qp: &QuantParams) -> Vec<i32> {
    x.iter().map(|&v| qp.quantize_value(v)).collect()
}

pub fn dequantize(q: &[i32], qp: &QuantParams) -> Vec<f32> {
    q.iter().map(|&v| qp.dequantize_value(v)).collect()
}

/// Quantize-dequantize in one pass.
pub fn fake_quantize(x: &[f32], qp: &QuantParams) -> Vec<f32> {
    x.iter()
        .map(|&v| qp.dequantize_value(qp.quantize_value(v)))
        .collect()
}

const LOG2_DOMAIN_SLACK: f32 = 1e-6;

/// Log2 level of a post-softmax probability: `clamp(round(-log2 x), 0, 2^bits - 1)`.
/// Zero maps to the largest level.
#[inline]
pub fn log2_level(x: f32, bits: u8) -> Result<u8> {
    let max_level = (1u32 << bits) - 1;
    if x.is_nan() || !(0.0..=1.0 + LOG2_DOMAIN_SLACK).contains(&x) {
        return Err(Error::Domain(format!(
            "log2 quantizer expects values in [0, 1], got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(max_level as u8);
    }
    let r = (-x.log2()).round_ties_even();
    Ok(r.clamp(0.0, max_level as f32) as u8)
}

pub fn log2_quantize(x: &[f32], bits: u8) -> Result<Vec<u8>> {
    x.iter().map(|&v| log2_level(v, bits)).collect()
}

#[inline]
pub fn log2_dequantize_value(q: u8) -> f32 {
    (-(q as f32)).exp2()
}

pub fn log2_dequantize(q: &[u8]) -> Vec<f32> {
    q.iter().map(|&v| log2_dequantize_value(v)).collect()
}

/// Largest power-of-two exponent applied to a LayerNorm input channel.
pub const PTF_MAX_EXPONENT: u8 = 3;

/// Power-of-two-factor parameters for a LayerNorm input: one shared
/// symmetric scale plus a per-channel exponent `alpha_c`, giving channel
/// scale `scale / 2^alpha_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtfParams {
    pub bits: u8,
    pub scale: f32,
    pub exponents: Vec<u8>,
}

impl PtfParams {
    pub fn channel_scale(&self, channel: usize) -> f32 {
        self.scale / (1u32 << self.exponents[channel]) as f32
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn quant_params(&self) -> QuantParams {
        QuantParams {
            scheme: Scheme::PotChannel,
            bits: self.bits,
            scale: self.scale,
            zero_point: 0,
        }
    }

    /// Quantize a row-major `[tokens, channels]` buffer; levels are symmetric.
    pub fn quantize(&self, x: &[f32]) -> Vec<i32> {
        let c = self.exponents.len();
        let qmax = self.qmax();
        x.iter()
            .enumerate()
            .map(|(i, &v)| quantize_level(v, self.channel_scale(i % c), 0, -qmax, qmax))
            .collect()
    }

    /// Reconstruct through the common fine scale `scale / 2^PTF_MAX_EXPONENT`,
    /// i.e. `(q << (3 - alpha_c)) * scale / 8`. Exact in f32.
    pub fn dequantize(&self, q: &[i32]) -> Vec<f32> {
        let c = self.exponents.len();
        let fine = self.scale / (1u32 << PTF_MAX_EXPONENT) as f32;
        q.iter()
            .enumerate()
            .map(|(i, &v)| {
                let shift = PTF_MAX_EXPONENT - self.exponents[i % c];
                (v << shift) as f32 * fine
            })
            .collect()
    }
}

/// Derive power-of-two factors from per-channel ranges (non-negative,
/// typically `max |x_c|`). `alpha_c = clamp(round(log2(max_range / range_c)), 0, 3)`;
/// channels with zero range take the largest exponent.
pub fn ptf_layernorm_params(ranges: &[f32], bits: u8) -> Result<PtfParams> {
    if ranges.is_empty() {
        return Err(Error::InvalidArgument("ptf needs at least one channel".into()));
    }
    if let Some(r) = ranges.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "channel ranges must be finite and non-negative, got {r}"
        )));
    }
    let max_range = ranges.iter().copied().fold(0.0f32, f32::max);
    let qmax = ((1u32 << (bits - 1)) - 1) as f32;
    let scale = if max_range > 0.0 { max_range / qmax } else { 1.0 };
    let exponents = ranges
        .iter()
        .map(|&r| {
            if r == 0.0 {
                PTF_MAX_EXPONENT
            } else {
                (max_range / r)
                    .log2()
                    .round_ties_even()
                    .clamp(0.0, PTF_MAX_EXPONENT as f32) as u8
            }
        })
        .collect();
    Ok(PtfParams {
        bits,
        scale,
        exponents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_maps_to_zero_point() {
        let qp = QuantParams::affine(8, 0.05, 17).unwrap();
        assert_eq!(qp.quantize_value(0.0), 17);
        assert_eq!(qp.dequantize_value(17), 0.0);
    }

    #[test]
    fn half_even_rounding() {
        let qp = QuantParams::symmetric(8, 0.1).unwrap();
        let q = qp.quantize_value(0.25);
        assert_eq!(q, 2);
        assert!((qp.dequantize_value(q) - 0.2).abs() < 1e-7);
        assert_eq!(qp.quantize_value(0.35), 4);
    }

    #[test]
    fn clamps_out_of_range() {
        let qp = QuantParams::symmetric(8, 1.0 / 127.0).unwrap();
        assert_eq!(qp.quantize_value(5.0), 127);
        assert_eq!(qp.quantize_value(-5.0), -127);
        assert_eq!(qp.quantize_value(f32::MAX), 127);
        let qa = QuantParams::affine(8, 0.1, 10).unwrap();
        assert_eq!(qa.quantize_value(-100.0), 0);
        assert_eq!(qa.quantize_value(100.0), 255);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::new(Scheme::Symmetric, 8, 0.1, 3).is_err());
        assert!(QuantParams::new(Scheme::Log2, 4, 0.5, 0).is_err());
        assert!(QuantParams::affine(8, 0.0, 0).is_err());
        assert!(QuantParams::affine(8, 0.1, 300).is_err());
        assert!(QuantParams::affine(6, 0.1, 0).is_err());
    }

    #[test]
    fn log2_levels() {
        assert_eq!(log2_level(1.0, 4).unwrap(), 0);
        assert_eq!(log2_level(0.5, 4).unwrap(), 1);
        assert_eq!(log2_level(0.3, 4).unwrap(), 2);
        assert_eq!(log2_dequantize_value(2), 0.25);
        assert_eq!(log2_level(0.0, 4).unwrap(), 15);
        assert_eq!(log2_level(1e-9, 4).unwrap(), 15);
        assert_eq!(log2_level(1.0 + 5e-7, 4).unwrap(), 0);
    }

    #[test]
    fn log2_domain_errors() {
        assert!(log2_level(1.01, 4).is_err());
        assert!(log2_level(-0.1, 4).is_err());
        assert!(log2_level(f32::NAN, 4).is_err());
    }

    #[test]
    fn ptf_exponents() {
        let p = ptf_layernorm_params(&[2.0, 2.0, 2.0], 8).unwrap();
        assert_eq!(p.exponents, vec![0, 0, 0]);
        let p = ptf_layernorm_params(&[1.0, 4.0], 8).unwrap();
        assert_eq!(p.exponents, vec![2, 0]);
        assert_eq!(p.scale, 4.0 / 127.0);
        let p = ptf_layernorm_params(&[0.0, 1.0, 100.0], 8).unwrap();
        assert_eq!(p.exponents, vec![3, 3, 0]);
    }

    #[test]
    fn ptf_round_trip_uses_channel_scale() {
        let p = ptf_layernorm_params(&[1.0, 4.0], 8).unwrap();
        let x = [0.5f32, 3.0, -1.0, -4.0];
        let q = p.quantize(&x);
        let y = p.dequantize(&q);
        for (i, (a, b)) in x.iter().zip(&y).enumerate() {
            assert!((a - b).abs() <= p.channel_scale(i % 2) / 2.0 + 1e-6, "{a} vs {b}");
        }
    }
}
