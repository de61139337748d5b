//! Post-training quantization: quantizers, calibrators and the persisted
//! calibration table.

pub mod calibrate;
pub mod params;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibrate::{
    calibrate_ema, calibrate_minmax, calibrate_omse, calibrate_percentile, quant_mse,
    Calibrated, CalibrationStats, ChannelRanges, ValueSample,
};
pub use params::{
    dequantize, fake_quantize, log2_dequantize, log2_quantize, ptf_layernorm_params, quantize,
    PtfParams, QuantParams, Scheme,
};

/// How int8 activation ranges are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Minmax,
    Ema,
    Percentile,
    Omse,
    /// MinMax for uniform sites, log2 4-bit attention and
    /// power-of-two-factor LayerNorm inputs.
    Fqvit,
    /// Fixed symmetric range `[-8, 8]`; no calibration data.
    DefaultRange,
}

impl CalibrationMethod {
    pub const ALL: [CalibrationMethod; 6] = [
        CalibrationMethod::Minmax,
        CalibrationMethod::Ema,
        CalibrationMethod::Percentile,
        CalibrationMethod::Omse,
        CalibrationMethod::Fqvit,
        CalibrationMethod::DefaultRange,
    ];

    pub fn id(self) -> u8 {
        match self {
            CalibrationMethod::Minmax => 1,
            CalibrationMethod::Ema => 2,
            CalibrationMethod::Percentile => 3,
            CalibrationMethod::Omse => 4,
            CalibrationMethod::Fqvit => 5,
            CalibrationMethod::DefaultRange => 6,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            CalibrationMethod::Minmax => "minmax",
            CalibrationMethod::Ema => "ema",
            CalibrationMethod::Percentile => "percentile",
            CalibrationMethod::Omse => "omse",
            CalibrationMethod::Fqvit => "fqvit",
            CalibrationMethod::DefaultRange => "default_range",
        }
    }

    pub fn needs_data(self) -> bool {
        self != CalibrationMethod::DefaultRange
    }
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method '{s}'; expected one of minmax, ema, percentile, omse, fqvit, default_range"
                ))
            })
    }
}

/// Quantization parameters of one activation site as persisted in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteQuant {
    pub scheme: Scheme,
    pub bits: u8,
    pub scale: f32,
    pub zero_point: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponents: Option<Vec<u8>>,
}

impl SiteQuant {
    pub fn uniform(qp: QuantParams) -> Self {
        SiteQuant {
            scheme: qp.scheme,
            bits: qp.bits,
            scale: qp.scale,
            zero_point: qp.zero_point,
            exponents: None,
        }
    }

    pub fn ptf(p: &PtfParams) -> Self {
        SiteQuant {
            scheme: Scheme::PotChannel,
            bits: p.bits,
            scale: p.scale,
            zero_point: 0,
            exponents: Some(p.exponents.clone()),
        }
    }

    pub fn quant_params(&self) -> QuantParams {
        QuantParams {
            scheme: self.scheme,
            bits: self.bits,
            scale: self.scale,
            zero_point: self.zero_point,
        }
    }

    pub fn ptf_params(&self) -> Option<PtfParams> {
        self.exponents.as_ref().map(|e| PtfParams {
            bits: self.bits,
            scale: self.scale,
            exponents: e.clone(),
        })
    }
}

/// Result of a calibration pass: site id → parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub method: CalibrationMethod,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub sites: IndexMap<String, SiteQuant>,
}

impl CalibrationTable {
    pub fn get(&self, site: &str) -> Result<&SiteQuant> {
        self.sites
            .get(site)
            .ok_or_else(|| Error::Calibration(format!("no parameters for site {site}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in CalibrationMethod::ALL {
            assert_eq!(m.name().parse::<CalibrationMethod>().unwrap(), m);
            assert_eq!(CalibrationMethod::from_id(m.id()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("entropy".parse::<CalibrationMethod>().is_err());
    }

    #[test]
    fn table_json_shape() {
        let mut sites = IndexMap::new();
        sites.insert(
            "head.in".to_string(),
            SiteQuant::uniform(QuantParams::affine(8, 0.1, 3).unwrap()),
        );
        sites.insert(
            "final_norm.in".to_string(),
            SiteQuant::ptf(&ptf_layernorm_params(&[1.0, 4.0], 8).unwrap()),
        );
        let t = CalibrationTable {
            method: CalibrationMethod::Fqvit,
            sample_count: 32,
            warnings: vec![],
            sites,
        };
        let v: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(v["method"], "fqvit");
        assert_eq!(v["sample_count"], 32);
        assert_eq!(v["sites"]["head.in"]["scheme"], "affine");
        assert!(v["sites"]["head.in"].get("exponents").is_none());
        assert_eq!(v["sites"]["final_norm.in"]["exponents"], serde_json::json!([2, 0]));
        let back: CalibrationTable = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
