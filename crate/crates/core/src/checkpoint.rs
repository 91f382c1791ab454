//! Checkpoint serialization for model parameters.
//!
//! Layout: 8-byte magic `SAPMCKPT`, version byte, length-prefixed UTF-8
//! model config in canonical text form, then one record per parameter in
//! registry order (name length u16, name bytes, rank u8, one u32 extent
//! per axis, element data as little-endian f32). Records run to end of
//! file; there is no count field.
//!
//! Values train in f64 but export as f32, so save/load is lossy in the
//! last ~29 bits. Everything downstream of a load (compression, eval)
//! sees identical values on every platform, which is what the bitstream
//! determinism contract needs.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Result, SapmError};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SAPMCKPT";
const VERSION: u8 = 1;

/// Serialize `model` (config and every registry entry, buffers included).
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let cfg_text = model.cfg.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    for (_, entry) in model.ps.iter() {
        let name = entry.name.as_bytes();
        assert!(name.len() <= u16::MAX as usize, "parameter name too long");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = entry.value.shape();
        assert!(shape.len() <= u8::MAX as usize, "parameter rank too large");
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in entry.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Rebuild a model from checkpoint bytes.
///
/// The config is parsed from the embedded text, a fresh model is
/// constructed from it, and every parameter is overwritten from the file.
/// A record naming an unknown parameter, a shape mismatch, or a missing
/// parameter is a format error: the file does not describe this code's
/// architecture.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(SapmError::format("bad checkpoint magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(SapmError::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| SapmError::format("checkpoint config is not UTF-8"))?;
    let cfg = ModelConfig::from_text(cfg_text)?;
    let mut model = Model::new(cfg)?;

    let mut loaded = vec![false; model.ps.len()];
    while !r.at_end() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SapmError::format("checkpoint parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank > 8 {
            return Err(SapmError::format(format!(
                "parameter {name}: rank {rank} out of range"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| SapmError::format(format!("parameter {name}: extent overflow")))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()? as f64);
        }
        let id = model
            .ps
            .find(&name)
            .ok_or_else(|| SapmError::format(format!("unknown parameter {name}")))?;
        if loaded[id.index()] {
            return Err(SapmError::format(format!("duplicate parameter {name}")));
        }
        if model.ps.value(id).shape() != shape.as_slice() {
            return Err(SapmError::format(format!(
                "parameter {name}: shape {:?} does not match model {:?}",
                shape,
                model.ps.value(id).shape()
            )));
        }
        model.ps.set_value(id, Tensor::new(shape, data));
        loaded[id.index()] = true;
    }
    if let Some(i) = loaded.iter().position(|&l| !l) {
        let (_, entry) = model.ps.iter().nth(i).expect("index in range");
        return Err(SapmError::format(format!(
            "checkpoint missing parameter {}",
            entry.name
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))
        .map_err(|e| SapmError::io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes =
        std::fs::read(path).map_err(|e| SapmError::io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SapmError::format("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("length checked"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("length checked"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("length checked"),
        ))
    }
}
