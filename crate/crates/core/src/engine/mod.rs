//! Precision-committed inference engines and the SWQE engine file.
//!
//! An engine is a [`ModelConfig`], a [`PrecisionMode`] and a
//! [`TensorArchive`] holding the committed tensors. Everything needed to run
//! it is decoded from the archive, so a freshly built engine and one loaded
//! from disk execute identically.
//!
//! Archive layout by precision:
//! * fp32: the canonical parameter tensors.
//! * fp16: matrices and norm gains as f16, biases and norm shifts as f32.
//! * int8: matrices as i8 levels with a per-output-channel f32
//!   `{module}.weight_scale`; biases and norms f32; one `act.{site}` marker
//!   per quantized activation site whose qparams carry the site's
//!   parameters, plus `act.{site}.exponents` (i32) for power-of-two-factor
//!   LayerNorm inputs.

mod calibration;
mod format;
mod int8;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, forward_with_hooks, ForwardHooks, ModelConfig, ParamKind, ParameterSet, param_specs};
use crate::quant::{CalibrationMethod, CalibrationTable};
use crate::tensor::{round_to_f16, Tensor, TensorArchive};

pub use calibration::{calibrate, quant_sites, SiteKind, DEFAULT_RANGE, OMSE_SAMPLE_CAPACITY};
pub use format::{ENGINE_MAGIC, ENGINE_VERSION};
pub use int8::{Kernel, MAX_GEMM_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
    Int8,
}

impl Precision {
    pub fn id(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
            Precision::Int8 => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        [Precision::Fp32, Precision::Fp16, Precision::Int8]
            .into_iter()
            .find(|p| p.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            _ => Err(Error::InvalidArgument(format!(
                "unknown precision '{s}'; expected fp32, fp16 or int8"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Precision plus, for int8, the activation calibration method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionMode {
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<CalibrationMethod>,
}

impl PrecisionMode {
    pub const FP32: PrecisionMode = PrecisionMode {
        precision: Precision::Fp32,
        method: None,
    };
    pub const FP16: PrecisionMode = PrecisionMode {
        precision: Precision::Fp16,
        method: None,
    };

    pub fn int8(method: CalibrationMethod) -> Self {
        PrecisionMode {
            precision: Precision::Int8,
            method: Some(method),
        }
    }

    pub fn new(precision: Precision, method: Option<CalibrationMethod>) -> Result<Self> {
        let mode = PrecisionMode { precision, method };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.precision, self.method) {
            (Precision::Int8, None) => Err(Error::InvalidArgument(
                "int8 needs a calibration method".into(),
            )),
            (Precision::Fp32 | Precision::Fp16, Some(m)) => Err(Error::InvalidArgument(format!(
                "method {m} only applies to int8"
            ))),
            _ => Ok(()),
        }
    }

    /// Weight / activation / attention bit widths.
    pub fn bits(&self) -> (u8, u8, u8) {
        match (self.precision, self.method) {
            (Precision::Fp32, _) => (32, 32, 32),
            (Precision::Fp16, _) => (16, 16, 16),
            (Precision::Int8, Some(CalibrationMethod::Fqvit)) => (8, 8, 4),
            (Precision::Int8, _) => (8, 8, 8),
        }
    }

    pub fn label(&self) -> String {
        match self.method {
            Some(m) => format!("int8:{m}"),
            None => self.precision.name().to_string(),
        }
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (w, a, att) = self.bits();
        write!(f, "{} {w}/{a}/{att}", self.label())
    }
}

enum Runtime {
    Float(ParameterSet),
    Int8(int8::Int8Model),
}

/// A committed, immutable model. `forward` takes `&self` and is safe to call
/// from several threads at once.
pub struct Engine {
    config: ModelConfig,
    mode: PrecisionMode,
    archive: TensorArchive,
    calibration: Option<CalibrationTable>,
    runtime: Runtime,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("mode", &self.mode)
            .field("tensors", &self.archive.len())
            .finish()
    }
}

struct F16Boundary;

impl ForwardHooks for F16Boundary {
    fn boundary(&mut self, values: &mut [f32]) {
        round_to_f16(values);
    }
}

fn keeps_f32(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::Bias | ParamKind::NormBeta)
}

/// Commit `params` to `mode`. Int8 modes other than `default_range` run a
/// full-precision calibration pass over `calibration_images`.
pub fn build_engine(
    params: &ParameterSet,
    cfg: &ModelConfig,
    mode: PrecisionMode,
    calibration_images: &[Tensor],
) -> Result<Engine> {
    mode.validate()?;
    cfg.validate()?;
    let archive = match mode.precision {
        Precision::Fp32 => params.to_archive(),
        Precision::Fp16 => {
            let mut archive = TensorArchive::new();
            for spec in param_specs(cfg) {
                let t = params.tensor(&spec.name)?;
                let t = if keeps_f32(spec.kind) {
                    t.clone()
                } else {
                    Tensor::from_f32_as_f16(spec.shape.clone(), t.as_f32()?)?
                };
                archive.push(spec.name, t)?;
            }
            archive
        }
        Precision::Int8 => {
            let method = mode.method.expect("validated");
            let table = calibrate(params, cfg, method, calibration_images)?;
            int8::commit(params, cfg, &table)?
        }
    };
    Engine::from_archive(cfg.clone(), mode, archive)
}

impl Engine {
    /// Decode the runtime for a committed archive.
    pub fn from_archive(config: ModelConfig, mode: PrecisionMode, archive: TensorArchive) -> Result<Self> {
        mode.validate()?;
        config.validate()?;
        let (runtime, calibration) = match mode.precision {
            Precision::Fp32 | Precision::Fp16 => {
                let widened = TensorArchive::from_entries(
                    archive
                        .entries()
                        .iter()
                        .map(|(n, t)| Ok((n.clone(), Tensor::from_f32(t.shape().to_vec(), t.to_f32_vec()?)?)))
                        .collect::<Result<Vec<_>>>()?,
                )?;
                (Runtime::Float(ParameterSet::from_archive(&config, &widened)?), None)
            }
            Precision::Int8 => {
                let method = mode.method.expect("validated");
                let (model, table) = int8::Int8Model::decode(&config, method, &archive)?;
                (Runtime::Int8(model), Some(table))
            }
        };
        Ok(Engine {
            config,
            mode,
            archive,
            calibration,
            runtime,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> PrecisionMode {
        self.mode
    }

    pub fn archive(&self) -> &TensorArchive {
        &self.archive
    }

    /// Activation parameters of an int8 engine.
    pub fn calibration(&self) -> Option<&CalibrationTable> {
        self.calibration.as_ref()
    }

    /// Logits for one preprocessed image; int8 engines use the integer kernels.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<f32>> {
        self.forward_with(image, Kernel::Integer)
    }

    /// Like [`Engine::forward`] with an explicit GEMM kernel. Float engines
    /// ignore the kernel.
    pub fn forward_with(&self, image: &Tensor, kernel: Kernel) -> Result<Vec<f32>> {
        match (&self.runtime, self.mode.precision) {
            (Runtime::Float(p), Precision::Fp32) => forward(image, &self.config, p),
            (Runtime::Float(p), _) => {
                let mut x = image.as_f32()?.to_vec();
                round_to_f16(&mut x);
                let img = Tensor::from_f32(image.shape().to_vec(), x)?;
                forward_with_hooks(&img, &self.config, p, &mut F16Boundary)
            }
            (Runtime::Int8(m), _) => m.forward(image, kernel),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        format::serialize(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::deserialize(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Serialized size in MiB, the "model size" of reports.
    pub fn size_mb(&self) -> Result<f64> {
        Ok(self.to_bytes()?.len() as f64 / (1u64 << 20) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_triples() {
        assert_eq!(PrecisionMode::FP32.bits(), (32, 32, 32));
        assert_eq!(PrecisionMode::FP16.bits(), (16, 16, 16));
        assert_eq!(PrecisionMode::int8(CalibrationMethod::Omse).bits(), (8, 8, 8));
        assert_eq!(PrecisionMode::int8(CalibrationMethod::Fqvit).bits(), (8, 8, 4));
        assert!(PrecisionMode::new(Precision::Int8, None).is_err());
        assert!(PrecisionMode::new(Precision::Fp16, Some(CalibrationMethod::Ema)).is_err());
        assert_eq!(PrecisionMode::int8(CalibrationMethod::Fqvit).to_string(), "int8:fqvit 8/8/4");
    }

    #[test]
    fn precision_ids_round_trip() {
        for p in [Precision::Fp32, Precision::Fp16, Precision::Int8] {
            assert_eq!(Precision::from_id(p.id()), Some(p));
            assert_eq!(p.name().parse::<Precision>().unwrap(), p);
        }
        assert!("bf16".parse::<Precision>().is_err());
    }
}
