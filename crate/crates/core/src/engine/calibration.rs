//! Full-precision calibration pass producing per-site activation parameters.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{activation_sites, forward_with_hooks, ForwardHooks, ModelConfig, ParameterSet};
use crate::quant::calibrate::DEFAULT_PERCENTILE;
use crate::quant::{
    calibrate_ema, calibrate_minmax, calibrate_omse, calibrate_percentile, ptf_layernorm_params,
    Calibrated, CalibrationMethod, CalibrationStats, CalibrationTable, ChannelRanges, QuantParams,
    Scheme, SiteQuant, ValueSample,
};
use crate::tensor::Tensor;

/// Symmetric activation range used by `default_range`.
pub const DEFAULT_RANGE: f32 = 8.0;

/// Values retained per site for the OMSE scale search.
pub const OMSE_SAMPLE_CAPACITY: usize = 4096;

const ACT_BITS: u8 = 8;
const LOG2_BITS: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    /// Input of an integer GEMM (linear layer or attention matmul operand).
    Uniform,
    /// Post-softmax attention probabilities.
    Attention,
    /// LayerNorm input; quantized only by `fqvit`.
    Norm,
}

fn site_kind(name: &str) -> SiteKind {
    if name.ends_with(".attn") {
        SiteKind::Attention
    } else if name.ends_with(".ln1.in")
        || name.ends_with(".ln2.in")
        || name.ends_with(".merge.norm.in")
        || name == "final_norm.in"
    {
        SiteKind::Norm
    } else {
        SiteKind::Uniform
    }
}

/// Activation sites quantized under `method`, in forward order, with the
/// row width each site is observed at.
pub fn quant_sites(cfg: &ModelConfig, method: CalibrationMethod) -> Vec<(String, usize, SiteKind)> {
    activation_sites(cfg)
        .into_iter()
        .filter_map(|(name, c)| {
            let kind = site_kind(&name);
            (kind != SiteKind::Norm || method == CalibrationMethod::Fqvit).then_some((name, c, kind))
        })
        .collect()
}

struct SiteState {
    stats: CalibrationStats,
    sample: Option<ValueSample>,
    channels: Option<ChannelRanges>,
}

struct Collector {
    sites: HashMap<String, SiteState>,
}

impl ForwardHooks for Collector {
    fn observing(&self) -> bool {
        true
    }

    fn observe(&mut self, site: &str, values: &[f32], _channels: usize) -> Result<()> {
        let Some(s) = self.sites.get_mut(site) else {
            return Ok(());
        };
        s.stats
            .observe(values)
            .map_err(|e| Error::Calibration(format!("site {site}: {e}")))?;
        if let Some(sample) = &mut s.sample {
            sample.extend(values);
        }
        if let Some(ch) = &mut s.channels {
            ch.observe(values)?;
        }
        Ok(())
    }
}

/// Run `images` through the full-precision model and derive parameters for
/// every site quantized by `method`. `default_range` ignores the images.
pub fn calibrate(
    params: &ParameterSet,
    cfg: &ModelConfig,
    method: CalibrationMethod,
    images: &[Tensor],
) -> Result<CalibrationTable> {
    let sites = quant_sites(cfg, method);
    let mut table = CalibrationTable {
        method,
        sample_count: 0,
        warnings: Vec::new(),
        sites: IndexMap::new(),
    };
    if method == CalibrationMethod::DefaultRange {
        let qp = QuantParams::symmetric(ACT_BITS, DEFAULT_RANGE / 127.0)?;
        for (name, _, _) in sites {
            table.sites.insert(name, SiteQuant::uniform(qp));
        }
        return Ok(table);
    }
    if images.is_empty() {
        return Err(Error::Calibration(format!("method {method} needs calibration images")));
    }
    let mut collector = Collector {
        sites: sites
            .iter()
            .map(|(name, c, kind)| {
                let state = SiteState {
                    stats: CalibrationStats::new(name.clone()),
                    sample: (method == CalibrationMethod::Omse).then(|| ValueSample::new(OMSE_SAMPLE_CAPACITY)),
                    channels: (*kind == SiteKind::Norm).then(|| ChannelRanges::new(*c)),
                };
                (name.clone(), state)
            })
            .collect(),
    };
    for img in images {
        forward_with_hooks(img, cfg, params, &mut collector)?;
    }
    table.sample_count = images.len();
    for (name, _, kind) in sites {
        let s = &collector.sites[&name];
        let site = match (kind, method) {
            (SiteKind::Norm, _) => {
                let ch = s.channels.as_ref().expect("norm site tracks channels");
                SiteQuant::ptf(&ptf_layernorm_params(&ch.abs_max, ACT_BITS)?)
            }
            (SiteKind::Attention, CalibrationMethod::Fqvit) => SiteQuant::uniform(QuantParams::log2(LOG2_BITS)?),
            _ => {
                let c: Calibrated = match method {
                    CalibrationMethod::Minmax | CalibrationMethod::Fqvit => {
                        calibrate_minmax(&s.stats, ACT_BITS, Scheme::Affine)?
                    }
                    CalibrationMethod::Ema => calibrate_ema(&s.stats, ACT_BITS, Scheme::Affine)?,
                    CalibrationMethod::Percentile => {
                        calibrate_percentile(&s.stats, ACT_BITS, Scheme::Affine, DEFAULT_PERCENTILE)?
                    }
                    CalibrationMethod::Omse => calibrate_omse(
                        &s.stats,
                        s.sample.as_ref().expect("omse keeps a sample").values(),
                        ACT_BITS,
                        Scheme::Affine,
                    )?,
                    CalibrationMethod::DefaultRange => unreachable!("handled above"),
                };
                if c.degenerate {
                    table
                        .warnings
                        .push(format!("{name}: no dynamic range observed, using scale 1"));
                }
                SiteQuant::uniform(c.params)
            }
        };
        table.sites.insert(name, site);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_sites_only_for_fqvit() {
        let cfg = ModelConfig::micro();
        let all = activation_sites(&cfg).len();
        let fq = quant_sites(&cfg, CalibrationMethod::Fqvit);
        let mm = quant_sites(&cfg, CalibrationMethod::Minmax);
        assert_eq!(fq.len(), all);
        let norms = fq.iter().filter(|s| s.2 == SiteKind::Norm).count();
        // ln1 + ln2 per block, one per merge, the final norm
        assert_eq!(norms, 2 * 4 + 1 + 1);
        assert_eq!(mm.len(), all - norms);
        assert!(mm.iter().all(|s| s.2 != SiteKind::Norm));
        assert_eq!(fq.iter().filter(|s| s.2 == SiteKind::Attention).count(), 4);
    }

    #[test]
    fn default_range_needs_no_images() {
        let cfg = ModelConfig::micro();
        let params = ParameterSet::init(&cfg, 0).unwrap();
        let t = calibrate(&params, &cfg, CalibrationMethod::DefaultRange, &[]).unwrap();
        assert_eq!(t.sample_count, 0);
        for s in t.sites.values() {
            assert_eq!(s.scheme, Scheme::Symmetric);
            assert_eq!(s.scale, 8.0 / 127.0);
        }
        assert!(calibrate(&params, &cfg, CalibrationMethod::Minmax, &[]).is_err());
    }

    #[test]
    fn nan_activation_is_a_calibration_error() {
        let cfg = ModelConfig::micro();
        let params = ParameterSet::init(&cfg, 0).unwrap();
        let s = cfg.image_size;
        let mut px = vec![0.1f32; s * s * 3];
        px[5] = f32::NAN;
        let img = Tensor::from_f32(vec![s, s, 3], px).unwrap();
        let err = calibrate(&params, &cfg, CalibrationMethod::Ema, &[img]).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)), "{err}");
    }
}
