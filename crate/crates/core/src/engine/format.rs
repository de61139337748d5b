//! SWQE engine file.
//!
//! ```text
//! "SWQE" | u32 version | u8 precision | u8 method | u8 w_bits | u8 a_bits | u8 attn_bits
//!        | u32 config_len | config JSON | SWTA archive | u32 crc32
//! ```
//! Integers are little-endian. The CRC covers every preceding byte.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quant::CalibrationMethod;
use crate::tensor::TensorArchive;

use super::{Engine, Precision, PrecisionMode};

pub const ENGINE_MAGIC: [u8; 4] = *b"SWQE";
pub const ENGINE_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 3 + 4;

pub(crate) fn serialize(engine: &Engine) -> Result<Vec<u8>> {
    let mode = engine.mode();
    let config = engine.config().to_json()?;
    let mut out = Vec::with_capacity(HEADER_LEN + config.len() + 64);
    out.extend_from_slice(&ENGINE_MAGIC);
    out.extend_from_slice(&ENGINE_VERSION.to_le_bytes());
    out.push(mode.precision.id());
    out.push(mode.method.map_or(0, |m| m.id()));
    let (w, a, att) = mode.bits();
    out.extend_from_slice(&[w, a, att]);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    engine.archive().write_into(&mut out);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(at, "truncated engine file"))
}

pub(crate) fn deserialize(bytes: &[u8]) -> Result<Engine> {
    if bytes.len() < 4 || bytes[..4] != ENGINE_MAGIC {
        return Err(Error::format(0, "not an engine file (bad magic)"));
    }
    let version = u32_at(bytes, 4)?;
    if version != ENGINE_VERSION {
        return Err(Error::format(4, format!("unsupported engine version {version}")));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::format(bytes.len(), "truncated engine file"));
    }
    let body = bytes.len() - 4;
    let stored = u32_at(bytes, body)?;
    let actual = crc32fast::hash(&bytes[..body]);
    if stored != actual {
        return Err(Error::format(
            body,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let precision = Precision::from_id(bytes[8]).ok_or_else(|| Error::format(8, format!("unknown precision {}", bytes[8])))?;
    let method = match bytes[9] {
        0 => None,
        id => Some(CalibrationMethod::from_id(id).ok_or_else(|| Error::format(9, format!("unknown method {id}")))?),
    };
    let mode = PrecisionMode::new(precision, method).map_err(|e| Error::format(8, e.to_string()))?;
    if bytes[10..13] != <[u8; 3]>::from(mode.bits()) {
        return Err(Error::format(10, format!("bit widths {:?} do not match {}", &bytes[10..13], mode.label())));
    }
    let config_len = u32_at(bytes, 13)? as usize;
    let config_end = HEADER_LEN
        .checked_add(config_len)
        .filter(|&e| e <= body)
        .ok_or_else(|| Error::format(13, "config length runs past end of file"))?;
    let text = std::str::from_utf8(&bytes[HEADER_LEN..config_end])
        .map_err(|e| Error::format(HEADER_LEN, format!("config is not utf-8: {e}")))?;
    let config = ModelConfig::from_json(text)?;
    let (archive, used) = TensorArchive::read_prefix(&bytes[config_end..body]).map_err(|e| match e {
        Error::Format { offset, reason } => Error::format(config_end + offset, reason),
        other => other,
    })?;
    if config_end + used != body {
        return Err(Error::format(config_end + used, "trailing bytes after tensor archive"));
    }
    Engine::from_archive(config, mode, archive)
}
